//! `tipqc`: fixtures, gate, scorer, synthesis, curation, evaluation and
//! the HTTP service under one binary.

mod common;
mod curate;
mod eval;
mod fixtures;
mod gate;
mod scorer;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tipqc", version, about = "Pipette-tip bubble QC and dataset curation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Procedural test frames.
    #[command(subcommand)]
    Fixtures(fixtures::Cmd),
    /// Image quality gate.
    #[command(subcommand)]
    Gate(gate::Cmd),
    /// Bubble classifier.
    #[command(subcommand)]
    Scorer(scorer::Cmd),
    /// Synthetic batch generation and filtering.
    #[command(subcommand)]
    Synth(synth::Cmd),
    /// Standardization, augmentation and the dataset manifest.
    #[command(subcommand)]
    Curate(curate::Cmd),
    /// Metrics, the mixing ablation and cost accounting.
    #[command(subcommand)]
    Eval(eval::Cmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Fixtures(c) => fixtures::run(c),
        Cmd::Gate(c) => gate::run(c),
        Cmd::Scorer(c) => scorer::run(c),
        Cmd::Synth(c) => synth::run(c),
        Cmd::Curate(c) => curate::run(c),
        Cmd::Eval(c) => eval::run(c),
        Cmd::Serve { config } => {
            let config = common::load_pipeline_config(config.as_deref())?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(tipqc_service::serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
