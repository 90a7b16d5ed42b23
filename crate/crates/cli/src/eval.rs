use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use tipqc_core::curator::Manifest;
use tipqc_core::eval::{
    cost_report, desk_pools, format_table, metrics, run_ablation, table_to_jsonl, AblationConfig, AblationTable, ConfusionMatrix, DeskPoolSpec,
};
use tipqc_core::scorer::Scorer;

use crate::common::{emit, read_toml};
use crate::scorer::{load_model, load_rows, Source};

/// `[ablation]` and `[pools]` tables.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFile {
    pub ablation: AblationConfig,
    pub pools: DeskPoolSpec,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Accuracy, precision, recall and F1 of a model on a split.
    Metrics {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        model: PathBuf,
    },
    /// Real/synthetic mixing ablation on rendered fixture pools.
    Ablation {
        /// TOML with `[ablation]` and `[pools]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Line-delimited rows; stdout after the table when omitted.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// SVG chart of accuracy and F1 against the synthetic share.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
    /// Acceptance rate and unit costs of a synthesis run.
    Cost {
        #[arg(long, required_unless_present = "manifest")]
        generated: Option<u64>,
        #[arg(long, required_unless_present = "manifest")]
        kept: Option<u64>,
        /// Total spend in currency units.
        #[arg(long)]
        total_cost: Option<f64>,
        /// Read candidate, audit and routing counts from a manifest.
        #[arg(long, conflicts_with_all = ["generated", "kept"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        audits: u64,
        #[arg(long, default_value_t = 0)]
        routed: u64,
    },
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Metrics { source, model } => {
            let model = load_model(&model)?;
            let data = load_rows(&source.rows()?)?;
            let pairs = data
                .par_iter()
                .map(|(g, y)| model.posterior(g).map(|f| ((f >= 0.5) as u8, *y)))
                .collect::<Result<Vec<_>, _>>()?;
            let cm = ConfusionMatrix::from_pairs(pairs)?;
            let m = metrics(&cm)?;
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "n={}  acc={:.4}  prec={}  rec={}  f1={}  (tp={} fp={} tn={} fn={})",
                m.n,
                m.accuracy,
                opt(m.precision),
                opt(m.recall),
                opt(m.f1),
                cm.tp,
                cm.fp,
                cm.tn,
                cm.fn_
            );
            println!("{}", json!({ "split": source.split, "confusion": cm, "metrics": m }));
        }
        Cmd::Ablation { config, jsonl, chart } => {
            let cfg: AblationFile = read_toml(config.as_deref())?;
            let t0 = Instant::now();
            let pools = desk_pools(&cfg.pools, &cfg.ablation.features)?;
            eprintln!(
                "pools: real train {} / syn {} / test {} in {:.1}s",
                pools.real_train.len(),
                pools.syn_train.len(),
                pools.test.len(),
                t0.elapsed().as_secs_f64()
            );
            let table = run_ablation(&cfg.ablation, &pools)?;
            print!("{}", format_table(&table));
            match &jsonl {
                Some(p) => emit(Some(p), &table_to_jsonl(&table))?,
                None => print!("\n{}", table_to_jsonl(&table)),
            }
            if let Some(p) = chart {
                fs::write(&p, svg_chart(&table)).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!("done in {:.1}s", t0.elapsed().as_secs_f64());
        }
        Cmd::Cost { generated, kept, total_cost, manifest, audits, routed } => {
            let report = match manifest {
                Some(p) => cost_from_manifest(&p, total_cost)?,
                None => cost_report(generated.unwrap_or(0), kept.unwrap_or(0), total_cost, audits, routed)?,
            };
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "generated={} kept={} acceptance={:.4} cost/image={} cost/accepted={} audit_fraction={}",
                report.generated,
                report.kept,
                report.acceptance_rate,
                opt(report.unit_cost),
                opt(report.cost_per_accepted),
                opt(report.audit_fraction)
            );
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cost_from_manifest(path: &Path, total_cost: Option<f64>) -> Result<tipqc_core::CostReport> {
    let m = Manifest::open(path).with_context(|| format!("opening {}", path.display()))?;
    let s = m.state().stats(crate::common::now_ms());
    if s.synthetic.total == 0 {
        bail!("{} has no synthetic candidates", path.display());
    }
    let routed = s.routes.total() as u64;
    let audits = (s.audit_fraction.unwrap_or(0.0) * routed as f64).round() as u64;
    Ok(cost_report(s.synthetic.total as u64, s.synthetic.auto_kept as u64, total_cost, audits, routed)?)
}

/// Two polylines over the synthetic fraction axis.
pub fn svg_chart(table: &AblationTable) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let x = |f: f64| pad + f * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", y(0.0), x(1.0), y(0.0));
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", y(0.0), y(1.0));
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}%</text>", x(t), y(0.0) + 16.0, t * 100.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.2}</text>", pad - 6.0, y(t) + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">synthetic share of training budget {}</text>", w / 2.0, h - 8.0, table.budget);
    let series: [(&str, &str, Vec<(f64, f64)>); 2] = [
        ("accuracy", "#1f77b4", table.rows.iter().map(|r| (r.synthetic_fraction, r.accuracy)).collect()),
        ("F1", "#d62728", table.rows.iter().filter_map(|r| r.f1.map(|f| (r.synthetic_fraction, f))).collect()),
    ];
    for (i, (name, color, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(f, v)| format!("{:.1},{:.1}", x(f), y(v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        for &(f, v) in pts {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", x(f), y(v));
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>", w - pad - 60.0, pad + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}
