//! Ingestion engine shared by the HTTP service and the CLI: standardize,
//! gate, score, route, store and journal.

use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curator::{standardize, EventKind, ImageRecord, Manifest, ManifestError, Source, StandardizeMode};
use crate::gate::{quality_score, GateConfig, GateReport};
use crate::raster::{self, RasterError};
use crate::router::{decide, Route, RoutingConfig, DEFAULT_LEASE_MS};
use crate::scorer::{confidence, Scorer, ScorerError};
use crate::synth::{CandidateResult, ConsistencyConfig};

pub const ENV_DATA_DIR: &str = "TIPQC_DATA_DIR";
pub const ENV_MODEL: &str = "TIPQC_MODEL";
pub const ENV_MANIFEST: &str = "TIPQC_MANIFEST";
pub const ENV_BIND: &str = "TIPQC_BIND";
pub const ENV_TOKEN: &str = "TIPQC_TOKEN";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("undecodable image: {0}")]
    Decode(String),
    #[error("rejected image: {0}")]
    Rejected(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scoring failed: {0}")]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Whether the request itself was at fault.
    pub fn is_client_error(&self) -> bool {
        matches!(self, PipelineError::Decode(_) | PipelineError::Rejected(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root for stored images.
    pub data_dir: PathBuf,
    /// Scorer model file.
    pub model: PathBuf,
    /// Manifest log; relative paths resolve against the working directory.
    pub manifest: PathBuf,
    pub bind: String,
    /// Static bearer token; no auth when absent.
    pub token: Option<String>,
    /// Directory polled for new PNG files.
    pub watch_dir: Option<PathBuf>,
    pub watch_interval_ms: u64,
    pub seed: u64,
    pub lease_ms: u64,
    /// Ingests in flight beyond which new ones are accepted and processed
    /// in the background.
    pub backlog: usize,
    pub snapshot_every: u64,
    pub standardize: StandardizeMode,
    pub gate: GateConfig,
    pub routing: RoutingConfig,
    pub consistency: ConsistencyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            model: PathBuf::from("model.json"),
            manifest: PathBuf::from("data/manifest.jsonl"),
            bind: "127.0.0.1:8080".into(),
            token: None,
            watch_dir: None,
            watch_interval_ms: 1000,
            seed: 0,
            lease_ms: DEFAULT_LEASE_MS,
            backlog: 32,
            snapshot_every: crate::curator::DEFAULT_SNAPSHOT_EVERY,
            standardize: StandardizeMode::Upscale,
            gate: GateConfig::default(),
            routing: RoutingConfig::default(),
            consistency: ConsistencyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads the file, then applies `TIPQC_*` overrides from `env`.
    pub fn load(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
        let mut c = Self::from_toml(&text)?;
        c.apply_env(env);
        Ok(c)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) {
        if let Some(v) = env(ENV_DATA_DIR) {
            self.data_dir = v.into();
        }
        if let Some(v) = env(ENV_MODEL) {
            self.model = v.into();
        }
        if let Some(v) = env(ENV_MANIFEST) {
            self.manifest = v.into();
        }
        if let Some(v) = env(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = env(ENV_TOKEN) {
            self.token = Some(v);
        }
    }

    /// Threshold invariants, plus the model file and watch directory must
    /// exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.routing.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.gate.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.consistency.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if (self.routing.tau_q - self.gate.tau_q).abs() > 0.0 {
            return Err(PipelineError::Config(format!(
                "routing.tau_q {} differs from gate.tau_q {}",
                self.routing.tau_q, self.gate.tau_q
            )));
        }
        if self.lease_ms == 0 {
            return Err(PipelineError::Config("lease_ms must be positive".into()));
        }
        if !self.model.is_file() {
            return Err(PipelineError::Config(format!("model file {} not found", self.model.display())));
        }
        if let Some(w) = self.watch_dir.as_ref().filter(|w| !w.is_dir()) {
            return Err(PipelineError::Config(format!("watch directory {} not found", w.display())));
        }
        Ok(())
    }

    pub fn images_dir(&self) -> PathBuf {
        self.data_dir.join("images")
    }
}

/// Everything computed from one frame before anything is stored.
#[derive(Debug, Clone)]
pub struct Analysis {
    /// Standardized frame, PNG encoded.
    pub png: Vec<u8>,
    pub digest: String,
    pub gate: GateReport,
    pub f: f64,
    pub scorer_id: String,
}

/// Decode, standardize, gate and score. Pure; safe to run concurrently.
pub fn analyze(bytes: &[u8], config: &PipelineConfig, scorer: &dyn Scorer) -> Result<Analysis, PipelineError> {
    let img = raster::decode(bytes).map_err(|e| match e {
        RasterError::Decode(m) => PipelineError::Decode(m),
        other => PipelineError::Decode(other.to_string()),
    })?;
    let std_img = match img {
        DynamicImage::ImageLuma8(g) => DynamicImage::ImageLuma8(standardize(&g, config.standardize).map_err(|e| PipelineError::Rejected(e.to_string()))?),
        other => DynamicImage::ImageRgb8(standardize(&other.to_rgb8(), config.standardize).map_err(|e| PipelineError::Rejected(e.to_string()))?),
    };
    let gray = raster::dynamic_to_gray(&std_img);
    let gate = quality_score(&gray, &config.gate).map_err(|e| PipelineError::Rejected(e.to_string()))?;
    let f = scorer.posterior(&gray)?;
    let png = raster::encode_png(&std_img).map_err(|e| PipelineError::Rejected(e.to_string()))?;
    Ok(Analysis { digest: raster::sha256_hex(&png), png, gate, f, scorer_id: scorer.id() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub record_id: String,
    pub decision: Route,
    pub q: f64,
    pub c: f64,
    pub f: f64,
    pub enqueued: bool,
}

/// Single writer over the manifest and the image store.
pub struct Engine {
    config: PipelineConfig,
    manifest: Manifest,
}

impl Engine {
    /// Opens or creates the manifest named in the config.
    pub fn open(config: PipelineConfig, now_ms: u64) -> Result<Self, PipelineError> {
        let mut manifest = Manifest::open_or_create(&config.manifest, config.seed, now_ms)?;
        manifest.set_snapshot_every(config.snapshot_every);
        Self::with_manifest(config, manifest)
    }

    pub fn with_manifest(config: PipelineConfig, manifest: Manifest) -> Result<Self, PipelineError> {
        let dir = config.images_dir();
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir, source })?;
        Ok(Self { config, manifest })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn image_path(&self, record_id: &str) -> PathBuf {
        self.config.images_dir().join(format!("{record_id}.png"))
    }

    fn store(&self, record_id: &str, png: &[u8]) -> Result<String, PipelineError> {
        let path = self.image_path(record_id);
        fs::write(&path, png).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        Ok(path.to_string_lossy().into_owned())
    }

    /// Routes an analyzed real frame, stores it and journals one event.
    pub fn commit_real(&mut self, a: Analysis, source_hint: Option<&str>, now_ms: u64) -> Result<IngestOutcome, PipelineError> {
        let id = self.manifest.state().next_record_id("r");
        let decision = decide(a.gate.q, a.f, &self.config.routing, now_ms);
        let path = self.store(&id, &a.png)?;
        let mut rec = ImageRecord::real(&id, path, a.digest, now_ms);
        rec.source_hint = source_hint.map(str::to_owned);
        rec.f = Some(a.f);
        rec.c = Some(decision.c);
        rec.route = Some(decision);
        rec.scorer_id = Some(a.scorer_id);
        rec.gate = Some(a.gate);
        let event = EventKind::Ingested { record: Box::new(rec), routing: Some(self.config.routing), consistency: None };
        if let Err(e) = self.manifest.commit(now_ms, event) {
            let _ = fs::remove_file(self.image_path(&id));
            return Err(e.into());
        }
        Ok(IngestOutcome {
            enqueued: decision.decision == Route::R,
            record_id: id,
            decision: decision.decision,
            q: decision.q,
            c: decision.c,
            f: decision.f,
        })
    }

    /// Full synchronous ingest of one real frame.
    pub fn ingest(&mut self, bytes: &[u8], source_hint: Option<&str>, scorer: &dyn Scorer, now_ms: u64) -> Result<IngestOutcome, PipelineError> {
        let a = analyze(bytes, &self.config, scorer)?;
        self.commit_real(a, source_hint, now_ms)
    }

    /// Journals a filtered synthesis candidate. `png` is the standardized
    /// frame.
    pub fn commit_virtual(
        &mut self,
        png: &[u8],
        gate: Option<GateReport>,
        result: &CandidateResult,
        scorer_id: &str,
        now_ms: u64,
    ) -> Result<String, PipelineError> {
        let id = self.manifest.state().next_record_id("v");
        let path = self.store(&id, png)?;
        let mut rec = ImageRecord::virtual_(&id, path, raster::sha256_hex(png), now_ms);
        rec.source_hint = Some(result.key.clone());
        rec.gate = gate;
        rec.f = Some(result.f);
        rec.c = Some(confidence(result.f));
        rec.kappa = Some(result.kappa);
        rec.intended_label = Some(result.intended_label);
        rec.synth_verdict = Some(result.verdict);
        rec.auto_keep = Some(result.auto_keep);
        rec.scorer_id = Some(scorer_id.into());
        let event = EventKind::Ingested { record: Box::new(rec), routing: None, consistency: Some(self.config.consistency) };
        if let Err(e) = self.manifest.commit(now_ms, event) {
            let _ = fs::remove_file(self.image_path(&id));
            return Err(e.into());
        }
        Ok(id)
    }

    /// Rescores auto-accepted real records with `scorer`; one event per
    /// record whose posterior changed. Returns the number rescored.
    pub fn rescore_auto(&mut self, scorer: &dyn Scorer, now_ms: u64) -> Result<usize, PipelineError> {
        let targets: Vec<(String, String, Option<f64>)> = self
            .manifest
            .state()
            .records
            .values()
            .filter(|r| r.source == Source::Real && r.route.is_some_and(|d| d.decision == Route::A))
            .map(|r| (r.record_id.clone(), r.image_path.clone(), r.f))
            .collect();
        let mut n = 0;
        for (id, path, old) in targets {
            let bytes = fs::read(&path).map_err(|source| PipelineError::Io { path: path.clone().into(), source })?;
            let gray = raster::dynamic_to_gray(&raster::decode(&bytes).map_err(|e| PipelineError::Decode(e.to_string()))?);
            let f = scorer.posterior(&gray)?;
            if old != Some(f) {
                self.manifest.commit(now_ms, EventKind::Rescored { record_id: id, f, scorer_id: scorer.id() })?;
                n += 1;
            }
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{render, sample_specs, Style};
    use crate::router::ItemState;
    use crate::scorer::PosteriorTable;
    use image::GrayImage;

    struct Fixed(f64);

    impl Scorer for Fixed {
        fn posterior(&self, _: &GrayImage) -> Result<f64, ScorerError> {
            Ok(self.0)
        }
        fn id(&self) -> String {
            format!("fixed:{}", self.0)
        }
    }

    fn engine(dir: &Path) -> Engine {
        let config = PipelineConfig { data_dir: dir.join("data"), manifest: dir.join("m.jsonl"), ..PipelineConfig::default() };
        Engine::open(config, 0).unwrap()
    }

    fn fixture_png() -> Vec<u8> {
        let spec = &sample_specs(1, 0.0, Style::RealStyle, 5).unwrap()[0];
        raster::encode_png(&DynamicImage::ImageRgb8(render(spec).unwrap().image)).unwrap()
    }

    #[test]
    fn clean_frame_routes_by_confidence() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine(dir.path());
        let png = fixture_png();
        let a = e.ingest(&png, Some("cam0"), &Fixed(0.01), 1).unwrap();
        assert_eq!((a.decision, a.record_id.as_str(), a.enqueued), (Route::A, "r-000001", false));
        let r = e.ingest(&png, None, &Fixed(0.3), 2).unwrap();
        assert_eq!(r.decision, Route::R);
        let st = e.manifest().state();
        assert_eq!(st.queue.list(Some(ItemState::Pending), 3).len(), 1);
        let rec = st.record("r-000001").unwrap();
        assert_eq!((rec.final_label, rec.source_hint.as_deref()), (Some(0), Some("cam0")));
        assert_eq!(raster::sha256_hex(&fs::read(&rec.image_path).unwrap()), rec.digest);
    }

    #[test]
    fn black_frame_is_dropped_and_garbage_is_a_client_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine(dir.path());
        let black = raster::encode_png(&DynamicImage::ImageLuma8(GrayImage::new(600, 1500))).unwrap();
        let d = e.ingest(&black, None, &Fixed(0.99), 1).unwrap();
        assert_eq!((d.decision, d.q, d.enqueued), (Route::D, 0.0, false));
        let err = e.ingest(b"not a png", None, &Fixed(0.5), 2).unwrap_err();
        assert!(err.is_client_error());
        let err = e.ingest(&raster::encode_png(&DynamicImage::ImageLuma8(GrayImage::new(4, 4))).unwrap(), None, &Fixed(0.5), 2).unwrap_err();
        assert!(err.is_client_error());
        assert_eq!(e.manifest().state().records.len(), 1);
    }

    #[test]
    fn rescore_updates_auto_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine(dir.path());
        let png = fixture_png();
        let id = e.ingest(&png, None, &Fixed(0.01), 1).unwrap().record_id;
        let gray = raster::dynamic_to_gray(&raster::decode(&fs::read(e.image_path(&id)).unwrap()).unwrap());
        let mut table = PosteriorTable::new("t");
        table.insert(crate::scorer::image_key(&gray), 0.98).unwrap();
        assert_eq!(e.rescore_auto(&table, 5).unwrap(), 1);
        assert_eq!(e.manifest().state().record(&id).unwrap().final_label, Some(1));
        assert_eq!(e.rescore_auto(&table, 6).unwrap(), 0);
    }

    #[test]
    fn config_env_overrides_and_validation() {
        let mut c = PipelineConfig::from_toml("bind = \"0.0.0.0:1\"\n[routing]\ntau_A = 0.9\n").unwrap();
        assert_eq!(c.routing.tau_a, 0.9);
        c.apply_env(|k| (k == ENV_BIND).then(|| "127.0.0.1:9".to_string()));
        assert_eq!(c.bind, "127.0.0.1:9");
        assert!(PipelineConfig::from_toml("[routing]\ntau_A = 0.5\n").unwrap().validate().is_err());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }
}
