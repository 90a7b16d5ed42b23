use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use image::GrayImage;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use tipqc_core::curator::{Manifest, Split, StandardizeMode};
use tipqc_core::scorer::{confidence, train, FeatureConfig, Scorer, ScorerModel, TrainConfig};

use crate::common::{load_gray, read_labeled, read_toml};

/// `[features]` and `[train]` tables.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub features: FeatureConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Manifest log to read labeled records from.
    #[arg(long, required_unless_present = "listing")]
    pub manifest: Option<PathBuf>,
    /// `path<TAB>label` listing instead of a manifest.
    #[arg(long, conflicts_with = "manifest")]
    pub listing: Option<PathBuf>,
    /// Manifest split: train, val, test, all, or mix for the current
    /// mixing selection.
    #[arg(long, default_value = "train")]
    pub split: String,
}

impl Source {
    pub fn rows(&self) -> Result<Vec<(PathBuf, u8)>> {
        if let Some(l) = &self.listing {
            return read_labeled(l);
        }
        let path = self.manifest.as_deref().context("--manifest or --listing is required")?;
        let m = Manifest::open(path).with_context(|| format!("opening {}", path.display()))?;
        let st = m.state();
        let rows = match self.split.to_ascii_lowercase().as_str() {
            "mix" => st.mix_listing().context("the manifest has no mixing selection")?,
            "all" => st.listing(None),
            s => st.listing(Some(parse_split(s)?)),
        };
        Ok(rows.into_iter().map(|r| (PathBuf::from(r.path), r.final_label)).collect())
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        "none" => Split::None,
        other => bail!("unknown split {other:?}"),
    })
}

pub fn load_rows(rows: &[(PathBuf, u8)]) -> Result<Vec<(GrayImage, u8)>> {
    rows.par_iter().map(|(p, y)| Ok((load_gray(p, StandardizeMode::Upscale)?, *y))).collect()
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train the linear scorer with class-balanced loss.
    Train {
        #[command(flatten)]
        source: Source,
        /// TOML with `[features]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `f` and `c` for each image, one JSON object per line.
    Score {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
    },
}

pub fn load_model(path: &Path) -> Result<ScorerModel> {
    ScorerModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Train { source, config, out } => {
            let cfg: TrainFile = read_toml(config.as_deref())?;
            let data = load_rows(&source.rows()?)?;
            if data.is_empty() {
                bail!("no labeled images to train on");
            }
            let model = train(&data, cfg.features, &cfg.train)?;
            model.save(&out)?;
            let correct = data
                .par_iter()
                .map(|(g, y)| model.posterior(g).map(|f| ((f >= 0.5) as u8 == *y) as usize))
                .sum::<Result<usize, _>>()?;
            let n1 = data.iter().filter(|(_, y)| *y == 1).count();
            println!(
                "{}",
                json!({
                    "out": out.display().to_string(),
                    "n": data.len(),
                    "n1": n1,
                    "n0": data.len() - n1,
                    "dim": model.dim(),
                    "final_loss": model.final_loss,
                    "train_accuracy": correct as f64 / data.len() as f64,
                    "scorer_id": model.id(),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Score { images, model } => {
            let model = load_model(&model)?;
            for p in images {
                let f = model.posterior(&load_gray(&p, StandardizeMode::Upscale)?)?;
                println!("{}", json!({ "path": p.display().to_string(), "f": f, "c": confidence(f) }));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
