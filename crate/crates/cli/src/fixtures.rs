use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Subcommand;

use tipqc_core::fixtures::{generate_to_dir, sample_specs, Style, SIDECAR_FILE};

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render labeled frames and a `path<TAB>label<TAB>digest` sidecar.
    Generate {
        #[arg(long)]
        n: usize,
        /// Fraction of frames with bubbles.
        #[arg(long, default_value_t = 0.5)]
        balance: f64,
        /// `real` or `syn`.
        #[arg(long, default_value = "real")]
        style: Style,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Generate { n, balance, style, seed, out_dir } => {
            let specs = sample_specs(n, balance, style, seed)?;
            let lines = generate_to_dir(&specs, &out_dir)?;
            let bubbles = lines.iter().filter(|l| l.label == 1).count();
            eprintln!(
                "wrote {} {style} frames ({bubbles} with bubbles) and {} to {}",
                lines.len(),
                SIDECAR_FILE,
                out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
