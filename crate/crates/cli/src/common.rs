use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::Args;
use image::{DynamicImage, GrayImage};
use serde::de::DeserializeOwned;

use tipqc_core::curator::{standardize, Manifest, StandardizeMode};
use tipqc_core::pipeline::PipelineConfig;
use tipqc_core::raster;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Pipeline config file plus a manifest override.
#[derive(Debug, Clone, Args)]
pub struct ManifestArgs {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest log; overrides the config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl ManifestArgs {
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut c = load_pipeline_config(self.config.as_deref())?;
        if let Some(m) = &self.manifest {
            c.manifest = m.clone();
        }
        Ok(c)
    }

    pub fn open(&self) -> Result<(PipelineConfig, Manifest)> {
        let c = self.pipeline()?;
        let mut m = Manifest::open(&c.manifest).with_context(|| format!("opening {}", c.manifest.display()))?;
        m.set_snapshot_every(c.snapshot_every);
        Ok((c, m))
    }
}

pub fn load_pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let env = |k: &str| std::env::var(k).ok();
    match path {
        Some(p) => PipelineConfig::load(p, env).with_context(|| format!("loading {}", p.display())),
        None => {
            let mut c = PipelineConfig::default();
            c.apply_env(env);
            Ok(c)
        }
    }
}

/// Parses a TOML file, or returns the default.
pub fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// A single file, or the PNG files directly inside a directory, sorted.
pub fn list_pngs(target: &Path) -> Result<Vec<PathBuf>> {
    if target.is_file() {
        return Ok(vec![target.to_path_buf()]);
    }
    if !target.is_dir() {
        bail!("{} does not exist", target.display());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(target)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Decoded, standardized grayscale frame.
pub fn load_gray(path: &Path, mode: StandardizeMode) -> Result<GrayImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let img = raster::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    standardize(&raster::dynamic_to_gray(&img), mode).with_context(|| format!("standardizing {}", path.display()))
}

/// Standardizes decoded image bytes, keeping grayscale frames single
/// channel.
pub fn standardize_dynamic(img: DynamicImage, mode: StandardizeMode) -> Result<DynamicImage> {
    Ok(match img {
        DynamicImage::ImageLuma8(g) => DynamicImage::ImageLuma8(standardize(&g, mode)?),
        other => DynamicImage::ImageRgb8(standardize(&other.to_rgb8(), mode)?),
    })
}

/// Standardized frame as PNG bytes and as grayscale.
pub fn load_standardized(path: &Path, mode: StandardizeMode) -> Result<(Vec<u8>, GrayImage)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let img = raster::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let img = standardize_dynamic(img, mode).with_context(|| format!("standardizing {}", path.display()))?;
    Ok((raster::encode_png(&img)?, raster::dynamic_to_gray(&img)))
}

/// `path<TAB>label[<TAB>...]` lines: fixture sidecars and exported
/// listings both qualify. Relative paths that do not exist are retried
/// against the listing's directory.
pub fn read_labeled(listing: &Path) -> Result<Vec<(PathBuf, u8)>> {
    let text = fs::read_to_string(listing).with_context(|| format!("reading {}", listing.display()))?;
    let base = listing.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(p), Some(y)) = (cols.next(), cols.next()) else {
            bail!("{}:{}: expected path<TAB>label", listing.display(), i + 1);
        };
        let y = match y {
            "0" => 0,
            "1" => 1,
            _ => bail!("{}:{}: label must be 0 or 1", listing.display(), i + 1),
        };
        let mut path = PathBuf::from(p);
        if path.is_relative() && !path.exists() && base.join(&path).exists() {
            path = base.join(path);
        }
        out.push((path, y));
    }
    Ok(out)
}

/// Writes to the file, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
