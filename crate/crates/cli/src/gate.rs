use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Subcommand;
use rayon::prelude::*;
use serde_json::{json, Value};

use tipqc_core::curator::StandardizeMode;
use tipqc_core::gate::{quality_score, GateConfig};

use crate::common::{list_pngs, load_gray, read_toml};

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Score one image or every PNG in a directory. Prints one JSON
    /// report per line: `path` plus the report fields, or `path` and
    /// `error`.
    Check {
        target: PathBuf,
        /// TOML file whose keys mirror the gate config fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    let Cmd::Check { target, config } = cmd;
    let config: GateConfig = read_toml(config.as_deref())?;
    config.validate()?;
    let files = list_pngs(&target)?;
    let lines: Vec<(bool, Value)> = files
        .par_iter()
        .map(|p| {
            let path = p.display().to_string();
            let report = load_gray(p, StandardizeMode::Upscale).and_then(|g| Ok(quality_score(&g, &config)?));
            match report {
                Ok(r) => {
                    let mut v = serde_json::to_value(r).expect("report serializes");
                    v.as_object_mut().expect("object").insert("path".into(), path.into());
                    (true, v)
                }
                Err(e) => (false, json!({ "path": path, "error": format!("{e:#}") })),
            }
        })
        .collect();
    let mut failed = false;
    for (ok, v) in lines {
        failed |= !ok;
        println!("{v}");
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
