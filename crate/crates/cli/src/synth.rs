use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use rayon::prelude::*;
use serde_json::json;

use tipqc_core::curator::StandardizeMode;
use tipqc_core::gate::quality_score;
use tipqc_core::pipeline::Engine;
use tipqc_core::raster;
use tipqc_core::scorer::Scorer;
use tipqc_core::synth::{build_batch, filter_candidates, parse_batch, parse_results, plan, Candidate, MockTransport, PromptSpec, Transport};

use crate::common::{emit, load_standardized, now_ms, standardize_dynamic, ManifestArgs};
use crate::scorer::load_model;

/// Candidate listing written by `import`.
const CANDIDATES_FILE: &str = "candidates.tsv";

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Sample prompt specs, one JSON object per line.
    Plan {
        #[arg(long)]
        n: usize,
        /// Reference image URIs.
        #[arg(long = "ref", required = true)]
        refs: Vec<String>,
        /// Probability of a BUBBLE intent.
        #[arg(long, default_value_t = 0.5)]
        intent_mix: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "syn")]
        prefix: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn specs into a batch request file.
    Build {
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer a batch request file with the local mock generator.
    Run {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        width: u32,
        #[arg(long, default_value_t = 1500)]
        height: u32,
        #[arg(long, default_value_t = 0.0)]
        flip_rate: f64,
        #[arg(long, default_value_t = 0.0)]
        degrade_rate: f64,
        #[arg(long, default_value_t = 0.0)]
        error_rate: f64,
    },
    /// Match a results file to its batch and write standardized candidates.
    Import {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply the consistency keep rule and spot-check sampling, then
    /// journal every candidate as a virtual record.
    Filter {
        /// `candidates.tsv` written by `import`.
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Overrides the model named in the config.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn read_specs(path: &PathBuf) -> Result<Vec<PromptSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Plan { n, refs, intent_mix, seed, prefix, out } => {
            let specs = plan(n, &refs, intent_mix, seed, &prefix)?;
            let text: String = specs.iter().map(|s| serde_json::to_string(s).expect("spec serializes") + "\n").collect();
            emit(out.as_deref(), &text)?;
        }
        Cmd::Build { specs, out } => {
            emit(out.as_deref(), &build_batch(&read_specs(&specs)?)?)?;
        }
        Cmd::Run { batch, out, width, height, flip_rate, degrade_rate, error_rate } => {
            let text = fs::read_to_string(&batch).with_context(|| format!("reading {}", batch.display()))?;
            let mock = MockTransport { flip_rate, degrade_rate, error_rate, ..MockTransport::new(width, height) };
            emit(out.as_deref(), &mock.run(&text)?)?;
        }
        Cmd::Import { batch, results, out_dir } => return import(batch, results, out_dir),
        Cmd::Filter { candidates, manifest, model } => return filter(candidates, manifest, model),
    }
    Ok(ExitCode::SUCCESS)
}

fn import(batch: PathBuf, results: PathBuf, out_dir: PathBuf) -> Result<ExitCode> {
    let (specs, batch_errors) = parse_batch(&fs::read_to_string(&batch).with_context(|| format!("reading {}", batch.display()))?);
    for e in &batch_errors {
        eprintln!("{}:{}: {}", batch.display(), e.line, e.message);
    }
    let text = fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
    let parsed = parse_results(&text, &specs);
    fs::create_dir_all(&out_dir)?;
    let written = parsed
        .images
        .par_iter()
        .map(|r| {
            let std_img = standardize_dynamic(raster::decode(&r.bytes)?, StandardizeMode::Upscale)?;
            let path = out_dir.join(format!("{}.png", r.key));
            fs::write(&path, raster::encode_png(&std_img)?)?;
            Ok(format!("{}\t{}\t{}\n", path.display(), r.key, r.intended_label))
        })
        .collect::<Vec<Result<String>>>();
    let mut listing = String::new();
    let mut failed = 0;
    for (r, w) in parsed.images.iter().zip(written) {
        match w {
            Ok(line) => listing.push_str(&line),
            Err(e) => {
                failed += 1;
                eprintln!("{}:{}: {}: {e:#}", results.display(), r.line, r.key);
            }
        }
    }
    fs::write(out_dir.join(CANDIDATES_FILE), listing)?;
    for e in &parsed.errors {
        eprintln!("{}:{}: {}{}", results.display(), e.line, e.key.as_deref().map(|k| format!("{k}: ")).unwrap_or_default(), e.message);
    }
    println!(
        "{}",
        json!({
            "requested": specs.len(),
            "imported": parsed.images.len() - failed,
            "line_errors": parsed.errors.len() + batch_errors.len(),
            "undecodable": failed,
            "unmatched_keys": parsed.unmatched_keys,
            "unknown_keys": parsed.unknown_keys,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn filter(candidates: PathBuf, margs: ManifestArgs, model: Option<PathBuf>) -> Result<ExitCode> {
    let mut config = margs.pipeline()?;
    if let Some(m) = model {
        config.model = m;
    }
    let scorer = load_model(&config.model)?;
    let text = fs::read_to_string(&candidates).with_context(|| format!("reading {}", candidates.display()))?;
    let mut cands = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let (Some(path), Some(key), Some(y)) = (cols.first(), cols.get(1), cols.get(2)) else {
            bail!("{}:{}: expected path<TAB>key<TAB>intended_label", candidates.display(), i + 1);
        };
        let intended_label: u8 = y.parse().ok().filter(|y| *y <= 1).with_context(|| format!("{}:{}: bad label", candidates.display(), i + 1))?;
        cands.push((PathBuf::from(path), key.to_string(), intended_label));
    }
    let (pngs, loaded): (Vec<Vec<u8>>, Vec<Candidate>) = cands
        .par_iter()
        .map(|(p, key, y)| {
            let (png, image) = load_standardized(p, config.standardize)?;
            Ok((png, Candidate { key: key.clone(), image_path: p.display().to_string(), intended_label: *y, image }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let outcome = filter_candidates(&loaded, &scorer, &config.gate, &config.consistency)?;
    let reports: Vec<_> = loaded.par_iter().map(|c| quality_score(&c.image, &config.gate).ok()).collect();

    let mut engine = Engine::open(config, now_ms())?;
    let scorer_id = scorer.id();
    for ((result, png), report) in outcome.results.iter().zip(&pngs).zip(reports) {
        engine.commit_virtual(png, report, result, &scorer_id, now_ms())?;
    }
    engine.manifest_mut().snapshot()?;
    println!("{}", json!({ "stats": outcome.stats, "spot_checks": outcome.spot_checks }));
    Ok(ExitCode::SUCCESS)
}
