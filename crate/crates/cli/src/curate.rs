use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Subcommand, ValueEnum};
use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use tipqc_core::curator::{
    augment, format_listing, mix, replay, snapshot_path, stratified_split, AugmentConfig, ClassCounts, EventKind, Manifest, Source, Split,
    SplitSpec, StandardizeMode,
};
use tipqc_core::pipeline::Engine;
use tipqc_core::raster;
use tipqc_core::router::HumanVerdict;

use crate::common::{emit, list_pngs, load_standardized, now_ms, read_toml, ManifestArgs};
use crate::scorer::{load_model, parse_split};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Upscale,
    Letterbox,
}

impl From<Mode> for StandardizeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Upscale => StandardizeMode::Upscale,
            Mode::Letterbox => StandardizeMode::Letterbox,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Bring images to 600x1500.
    Standardize {
        /// Image or directory of PNGs.
        input: PathBuf,
        /// Output file for a single image, otherwise a directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "upscale")]
        mode: Mode,
    },
    /// Write jittered copies of each image.
    Augment {
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML whose keys mirror the augmentation ranges.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gate, score and route real frames into the manifest.
    Ingest {
        /// Image or directory of PNGs.
        target: PathBuf,
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Record a reviewer verdict offline (claim and label in one step).
    Label {
        record_id: String,
        /// 0, 1 or UNQUALIFIED.
        #[arg(long)]
        label: String,
        #[arg(long, default_value = "cli")]
        reviewer: String,
        #[command(flatten)]
        manifest: ManifestArgs,
    },
    /// Stratified train/val/test split of the usable real records.
    /// Usable virtual records go to train.
    Split {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// `reference`, `counts:TB/TN,VB/VN,EB/EN` (bubble/no-bubble per split)
        /// or `ratios:TRAIN,VAL,TEST`.
        #[arg(long, default_value = "reference")]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Select a class-balanced real/synthetic training mix.
    Mix {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        budget: usize,
        /// Synthetic share of the budget.
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Training listing `path<TAB>label<TAB>source<TAB>record_id`.
    Export {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// train, val, test, all, or mix.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rescore auto-accepted real records with a new model.
    Relabel {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Manifest statistics as JSON.
    Stats {
        #[command(flatten)]
        manifest: ManifestArgs,
    },
    /// Fold the log from scratch and compare with the snapshot.
    Replay {
        #[command(flatten)]
        manifest: ManifestArgs,
    },
}

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Standardize { input, out, mode } => standardize_cmd(&input, &out, mode.into()),
        Cmd::Augment { input, out_dir, copies, seed, config } => augment_cmd(&input, &out_dir, copies, seed, config.as_deref()),
        Cmd::Ingest { target, manifest, model } => ingest(&target, &manifest, model),
        Cmd::Label { record_id, label, reviewer, manifest } => {
            let verdict = HumanVerdict::parse(&label).with_context(|| format!("label {label:?} must be 0, 1 or UNQUALIFIED"))?;
            let (config, mut m) = manifest.open()?;
            let now = now_ms();
            m.commit(now, EventKind::Claimed { record_id: record_id.clone(), reviewer: reviewer.clone(), lease_ms: config.lease_ms })?;
            m.commit(now, EventKind::HumanLabeled { record_id: record_id.clone(), reviewer, label: verdict })?;
            m.snapshot()?;
            println!("{}", serde_json::to_string(m.state().record(&record_id)?)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Split { manifest, spec, seed } => split(&manifest, &spec, seed),
        Cmd::Mix { manifest, budget, fraction, seed } => mix_cmd(&manifest, budget, fraction, seed),
        Cmd::Export { manifest, split, out } => {
            let (_, m) = manifest.open()?;
            let rows = match split.to_ascii_lowercase().as_str() {
                "mix" => m.state().mix_listing().context("the manifest has no mixing selection")?,
                "all" => m.state().listing(None),
                s => m.state().listing(Some(parse_split(s)?)),
            };
            emit(out.as_deref(), &format_listing(&rows))?;
            eprintln!("{} rows", rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Relabel { manifest, model } => {
            let config = manifest.pipeline()?;
            let model = load_model(&model)?;
            let mut engine = Engine::open(config, now_ms())?;
            let n = engine.rescore_auto(&model, now_ms())?;
            engine.manifest_mut().snapshot()?;
            println!("{}", json!({ "rescored": n }));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Stats { manifest } => {
            let (_, m) = manifest.open()?;
            println!("{}", serde_json::to_string_pretty(&m.state().stats(now_ms()))?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay { manifest } => {
            let config = manifest.pipeline()?;
            let folded = replay(&config.manifest)?;
            let opened = Manifest::open(&config.manifest)?;
            let same = folded.canonical_bytes() == opened.state().canonical_bytes();
            println!(
                "{}",
                json!({
                    "events": folded.events,
                    "records": folded.records.len(),
                    "state_sha256": raster::sha256_hex(&folded.canonical_bytes()),
                    "snapshot": snapshot_path(&config.manifest).exists(),
                    "matches_open": same,
                })
            );
            Ok(if same { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn standardize_cmd(input: &Path, out: &Path, mode: StandardizeMode) -> Result<ExitCode> {
    if input.is_file() {
        let (png, _) = load_standardized(input, mode)?;
        fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
        return Ok(ExitCode::SUCCESS);
    }
    fs::create_dir_all(out)?;
    let files = list_pngs(input)?;
    files.par_iter().try_for_each(|p| -> Result<()> {
        let (png, _) = load_standardized(p, mode)?;
        let name = p.file_name().context("file name")?;
        fs::write(out.join(name), png)?;
        Ok(())
    })?;
    eprintln!("standardized {} images into {}", files.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn augment_cmd(input: &Path, out_dir: &Path, copies: usize, seed: u64, config: Option<&Path>) -> Result<ExitCode> {
    let config: AugmentConfig = read_toml(config)?;
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let files = list_pngs(input)?;
    let jobs: Vec<(usize, &PathBuf, usize)> =
        files.iter().enumerate().flat_map(|(i, p)| (0..copies).map(move |k| (i, p, k))).collect();
    let lines = jobs
        .par_iter()
        .map(|&(i, p, k)| -> Result<String> {
            let img = raster::decode(&fs::read(p)?).with_context(|| format!("decoding {}", p.display()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 20) ^ k as u64);
            let out = match img {
                DynamicImage::ImageLuma8(g) => DynamicImage::ImageLuma8(augment(&g, &config, &mut rng)?.0),
                other => DynamicImage::ImageRgb8(augment(&other.to_rgb8(), &config, &mut rng)?.0),
            };
            let stem = p.file_stem().context("file name")?.to_string_lossy();
            let dst = out_dir.join(format!("{stem}_aug{k}.png"));
            fs::write(&dst, raster::encode_png(&out)?)?;
            Ok(format!("{}\t{}\n", dst.display(), p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    print!("{}", lines.concat());
    Ok(ExitCode::SUCCESS)
}

fn ingest(target: &Path, margs: &ManifestArgs, model: Option<PathBuf>) -> Result<ExitCode> {
    let mut config = margs.pipeline()?;
    if let Some(m) = model {
        config.model = m;
    }
    config.validate()?;
    let scorer = load_model(&config.model)?;
    let mut engine = Engine::open(config, now_ms())?;
    let mut failed = false;
    for p in list_pngs(target)? {
        let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        let hint = format!("cli:{}", p.display());
        match engine.ingest(&bytes, Some(&hint), &scorer, now_ms()) {
            Ok(o) => {
                let mut v = serde_json::to_value(&o)?;
                v.as_object_mut().expect("object").insert("path".into(), p.display().to_string().into());
                println!("{v}");
            }
            Err(e) if e.is_client_error() => {
                failed = true;
                println!("{}", json!({ "path": p.display().to_string(), "error": e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    engine.manifest_mut().snapshot()?;
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn parse_counts(s: &str) -> Result<ClassCounts> {
    let (b, n) = s.split_once('/').with_context(|| format!("{s:?}: expected BUBBLE/NO_BUBBLE"))?;
    Ok(ClassCounts::new(b.trim().parse()?, n.trim().parse()?))
}

pub fn parse_split_spec(s: &str) -> Result<SplitSpec> {
    if s == "reference" {
        return Ok(SplitSpec::reference());
    }
    let (kind, rest) = s.split_once(':').with_context(|| format!("split spec {s:?}"))?;
    let parts: Vec<&str> = rest.split(',').collect();
    if parts.len() != 3 {
        bail!("split spec {s:?} needs three comma-separated parts");
    }
    match kind {
        "counts" => Ok(SplitSpec::Counts { train: parse_counts(parts[0])?, val: parse_counts(parts[1])?, test: parse_counts(parts[2])? }),
        "ratios" => Ok(SplitSpec::Ratios { train: parts[0].trim().parse()?, val: parts[1].trim().parse()?, test: parts[2].trim().parse()? }),
        other => bail!("unknown split kind {other:?}"),
    }
}

fn split(margs: &ManifestArgs, spec: &str, seed: u64) -> Result<ExitCode> {
    let spec = parse_split_spec(spec)?;
    let (_, mut m) = margs.open()?;
    let st = m.state();
    let usable = || st.records.values().filter(|r| r.usable());
    let real: Vec<(String, u8)> =
        usable().filter(|r| r.source == Source::Real).map(|r| (r.record_id.clone(), r.final_label.expect("usable"))).collect();
    let mut assignment = stratified_split(&real, &spec, seed)?;
    assignment.extend(usable().filter(|r| r.source == Source::Virtual).map(|r| (r.record_id.clone(), Split::Train)));
    m.commit(now_ms(), EventKind::SplitAssigned { spec, seed, assignment })?;
    m.snapshot()?;
    println!("{}", serde_json::to_string(&m.state().stats(now_ms()).splits)?);
    Ok(ExitCode::SUCCESS)
}

fn mix_cmd(margs: &ManifestArgs, budget: usize, fraction: f64, seed: u64) -> Result<ExitCode> {
    let (_, mut m) = margs.open()?;
    let train: Vec<(String, u8, Source)> = m
        .state()
        .records
        .values()
        .filter(|r| r.usable() && r.split == Split::Train)
        .map(|r| (r.record_id.clone(), r.final_label.expect("usable"), r.source))
        .collect();
    let pool = |src: Source| -> Vec<(String, u8)> { train.iter().filter(|t| t.2 == src).map(|t| (t.0.clone(), t.1)).collect() };
    let (real, syn) = (pool(Source::Real), pool(Source::Virtual));
    let sel = mix(&real, &syn, budget, fraction, seed)?;
    let ids = |p: &[(String, u8)], idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| p[i].0.clone()).collect() };
    let (real_ids, syn_ids) = (ids(&real, &sel.real), ids(&syn, &sel.syn));
    m.commit(now_ms(), EventKind::Mixed { budget, synthetic_fraction: fraction, seed, real: real_ids, syn: syn_ids })?;
    m.snapshot()?;
    let (s, r) = sel.composition();
    println!("{}", json!({ "budget": budget, "synthetic_fraction": fraction, "syn": s, "real": r }));
    Ok(ExitCode::SUCCESS)
}
