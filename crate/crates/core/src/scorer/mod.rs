//! Binary bubble scorer: a logistic head over a fixed feature map, trained
//! with the class-balanced cross-entropy.

mod features;
mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{FeatureConfig, GRADIENT_FEATURES, MAGNITUDE_BANDS, ORIENTATION_BINS};
pub use train::{standardization, train, train_features, TrainConfig};

/// Saturation guard applied to `f` before taking logs.
pub const LOG_EPS: f64 = 1e-12;

pub const MODEL_FORMAT: &str = "tipqc-scorer";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model incompatible with input: {0}")]
    Incompatible(String),
    #[error("training needs both classes (got n0={n0}, n1={n1})")]
    SingleClass { n0: usize, n1: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("no posterior recorded for image {0}")]
    UnknownImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c = max(f, 1 - f)`.
pub fn confidence(f: f64) -> f64 {
    f.max(1.0 - f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub beta: f64,
    pub n0: u64,
    pub n1: u64,
    pub alpha0: f64,
    pub alpha1: f64,
}

impl ClassWeights {
    pub fn alpha(&self, label: u8) -> f64 {
        if label == 1 {
            self.alpha1
        } else {
            self.alpha0
        }
    }

    /// Same ratio `alpha1 / alpha0`, rescaled so the two weights sum to 2.
    pub fn normalized(&self) -> ClassWeights {
        let s = 2.0 / (self.alpha0 + self.alpha1);
        ClassWeights { alpha0: self.alpha0 * s, alpha1: self.alpha1 * s, ..*self }
    }

    pub fn uniform() -> ClassWeights {
        ClassWeights { beta: 0.0, n0: 1, n1: 1, alpha0: 1.0, alpha1: 1.0 }
    }
}

/// `(1 - beta) / (1 - beta^n)`, evaluated without cancellation near
/// `beta = 1`.
fn effective_weight(n: u64, beta: f64) -> f64 {
    if beta == 0.0 || n == 1 {
        return 1.0;
    }
    let one_minus = 1.0 - beta;
    let denom = -(n as f64 * (-one_minus).ln_1p()).exp_m1();
    one_minus / denom
}

/// Class weights `alpha_y = (1 - beta) / (1 - beta^{n_y})`.
pub fn class_weights(n0: u64, n1: u64, beta: f64) -> Result<ClassWeights, ScorerError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(ScorerError::InvalidParameter(format!("beta {beta} outside [0, 1)")));
    }
    if n0 == 0 || n1 == 0 {
        return Err(ScorerError::InvalidParameter(format!("class counts must be >= 1 (n0={n0}, n1={n1})")));
    }
    Ok(ClassWeights { beta, n0, n1, alpha0: effective_weight(n0, beta), alpha1: effective_weight(n1, beta) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class-balanced BCE over already-featurized samples:
/// `(1/|B|) * sum alpha_y * BCE(y, f) + l2 * |w|^2` and its exact gradient.
pub fn cb_loss_and_grad_features<F: AsRef<[f64]>>(
    w: &[f64],
    b: f64,
    features: &[F],
    labels: &[u8],
    weights: &ClassWeights,
    l2: f64,
) -> Result<LossAndGrad, ScorerError> {
    if features.is_empty() {
        return Err(ScorerError::EmptyBatch);
    }
    if features.len() != labels.len() {
        return Err(ScorerError::InvalidParameter(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_b = 0.0;
    for (phi, &y) in features.iter().zip(labels) {
        let phi = phi.as_ref();
        if phi.len() != w.len() {
            return Err(ScorerError::Incompatible(format!("feature dim {} vs weights {}", phi.len(), w.len())));
        }
        if y > 1 {
            return Err(ScorerError::InvalidLabel(y));
        }
        let alpha = weights.alpha(y);
        let raw = sigmoid(dot(w, phi) + b);
        let f = raw.clamp(LOG_EPS, 1.0 - LOG_EPS);
        loss += alpha * if y == 1 { -f.ln() } else { -(1.0 - f).ln() };
        if raw == f {
            let g = alpha * (f - y as f64) / n;
            grad_b += g;
            for (gw, x) in grad_w.iter_mut().zip(phi) {
                *gw += g * x;
            }
        }
    }
    loss /= n;
    loss += l2 * dot(w, w);
    for (gw, wi) in grad_w.iter_mut().zip(w) {
        *gw += 2.0 * l2 * wi;
    }
    Ok(LossAndGrad { loss, grad_w, grad_b })
}

/// [`cb_loss_and_grad_features`] on images, featurized through `model`.
pub fn cb_loss_and_grad(
    model: &ScorerModel,
    batch: &[(GrayImage, u8)],
    weights: &ClassWeights,
    l2: f64,
) -> Result<LossAndGrad, ScorerError> {
    let feats = batch.iter().map(|(img, _)| model.featurize(img)).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = batch.iter().map(|(_, y)| *y).collect();
    cb_loss_and_grad_features(&model.w, model.b, &feats, &labels, weights, l2)
}

/// Anything that maps a standardized frame to a posterior `f`.
pub trait Scorer: Send + Sync {
    fn posterior(&self, gray: &GrayImage) -> Result<f64, ScorerError>;
    /// Stable identifier recorded alongside every score.
    fn id(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerModel {
    pub format: String,
    pub version: u32,
    pub feature_config: FeatureConfig,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
    pub training_seed: u64,
    pub final_loss: f64,
    /// sha256 over the JSON encoding with this field empty.
    #[serde(default)]
    pub digest: String,
}

impl ScorerModel {
    /// All-zero head with identity standardization.
    pub fn zeros(feature_config: FeatureConfig) -> Result<Self, ScorerError> {
        feature_config.validate()?;
        let d = feature_config.dim();
        Ok(Self::from_parts(feature_config, vec![0.0; d], vec![1.0; d], vec![0.0; d], 0.0, 0, 0.0))
    }

    pub fn from_parts(
        feature_config: FeatureConfig,
        feature_means: Vec<f64>,
        feature_scales: Vec<f64>,
        w: Vec<f64>,
        b: f64,
        training_seed: u64,
        final_loss: f64,
    ) -> Self {
        let mut m = ScorerModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            feature_config,
            feature_means,
            feature_scales,
            w,
            b,
            training_seed,
            final_loss,
            digest: String::new(),
        };
        m.digest = m.compute_digest();
        m
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    fn compute_digest(&self) -> String {
        let body = ScorerModel { digest: String::new(), ..self.clone() };
        crate::raster::sha256_hex(&serde_json::to_vec(&body).expect("model serializes"))
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(ScorerError::ModelFile(format!("unsupported format {} v{}", self.format, self.version)));
        }
        self.feature_config.validate()?;
        let d = self.feature_config.dim();
        if self.w.len() != d || self.feature_means.len() != d || self.feature_scales.len() != d {
            return Err(ScorerError::Incompatible(format!(
                "feature config implies dim {d}; w has {}, means {}, scales {}",
                self.w.len(),
                self.feature_means.len(),
                self.feature_scales.len()
            )));
        }
        if self.feature_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ScorerError::ModelFile("feature scales must be positive".into()));
        }
        Ok(())
    }

    /// Standardized feature vector of a frame.
    pub fn featurize(&self, gray: &GrayImage) -> Result<Vec<f64>, ScorerError> {
        let raw = self.feature_config.extract(gray)?;
        self.standardize(raw)
    }

    pub fn standardize(&self, mut raw: Vec<f64>) -> Result<Vec<f64>, ScorerError> {
        if raw.len() != self.dim() {
            return Err(ScorerError::Incompatible(format!("feature dim {} vs model {}", raw.len(), self.dim())));
        }
        for ((v, m), s) in raw.iter_mut().zip(&self.feature_means).zip(&self.feature_scales) {
            *v = (*v - m) / s;
        }
        Ok(raw)
    }

    /// `f = sigmoid(w . phi + b)` on a standardized feature vector.
    pub fn posterior_features(&self, phi: &[f64]) -> Result<f64, ScorerError> {
        if phi.len() != self.dim() {
            return Err(ScorerError::Incompatible(format!("feature dim {} vs model {}", phi.len(), self.dim())));
        }
        Ok(sigmoid(dot(&self.w, phi) + self.b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScorerError> {
        let m: ScorerModel = serde_json::from_str(text).map_err(|e| ScorerError::ModelFile(e.to_string()))?;
        m.validate()?;
        let expected = m.compute_digest();
        if m.digest != expected {
            return Err(ScorerError::ModelFile(format!("digest mismatch: file {} computed {expected}", m.digest)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl Scorer for ScorerModel {
    fn posterior(&self, gray: &GrayImage) -> Result<f64, ScorerError> {
        self.posterior_features(&self.featurize(gray)?)
    }

    fn id(&self) -> String {
        format!("linear:{}", &self.digest[..16.min(self.digest.len())])
    }
}

/// Content key of a grayscale frame, used to look up imported posteriors.
pub fn image_key(gray: &GrayImage) -> String {
    let mut bytes = format!("{}x{}:", gray.width(), gray.height()).into_bytes();
    bytes.extend_from_slice(gray.as_raw());
    crate::raster::sha256_hex(&bytes)
}

/// Posteriors produced elsewhere (for example by a deep model) and imported
/// from a `key<TAB>f` file, keyed by [`image_key`].
#[derive(Debug, Clone, Default)]
pub struct PosteriorTable {
    name: String,
    table: HashMap<String, f64>,
}

impl PosteriorTable {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), table: HashMap::new() }
    }

    pub fn insert(&mut self, key: String, f: f64) -> Result<(), ScorerError> {
        if !(f > 0.0 && f < 1.0) {
            return Err(ScorerError::InvalidParameter(format!("posterior {f} outside (0, 1)")));
        }
        self.table.insert(key, f);
        Ok(())
    }

    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, ScorerError> {
        let mut t = Self::new(name);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, f) = line
                .split_once('\t')
                .ok_or_else(|| ScorerError::ModelFile(format!("line {}: expected key<TAB>f", i + 1)))?;
            let f: f64 = f.trim().parse().map_err(|_| ScorerError::ModelFile(format!("line {}: bad posterior", i + 1)))?;
            t.insert(key.to_string(), f).map_err(|e| ScorerError::ModelFile(format!("line {}: {e}", i + 1)))?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        Self::parse(path.display().to_string(), &fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Scorer for PosteriorTable {
    fn posterior(&self, gray: &GrayImage) -> Result<f64, ScorerError> {
        let key = image_key(gray);
        self.table.get(&key).copied().ok_or(ScorerError::UnknownImage(key))
    }

    fn id(&self) -> String {
        format!("table:{}", self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn small_cfg() -> FeatureConfig {
        FeatureConfig { grid: (4, 2), use_gradient_hist: false, standardize: false }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(0.5), 0.5);
        assert_eq!(confidence(0.9), 0.9);
        assert_eq!(confidence(0.2), 0.8);
    }

    #[test]
    fn weights_examples() {
        let w = class_weights(1501, 1701, 0.0).unwrap();
        assert_eq!((w.alpha0, w.alpha1), (1.0, 1.0));
        let w = class_weights(10, 1, 0.9).unwrap();
        assert_eq!(w.alpha1, 1.0);
        let direct = 0.1 / (1.0 - 0.9f64.powi(10));
        assert!((w.alpha0 - direct).abs() <= 1e-12 * direct);
        assert!(class_weights(3, 3, 1.0).is_err());
        assert!(class_weights(0, 3, 0.5).is_err());
    }

    #[test]
    fn normalized_keeps_ratio() {
        let w = class_weights(900, 100, 0.999).unwrap();
        let n = w.normalized();
        assert!((n.alpha0 + n.alpha1 - 2.0).abs() < 1e-12);
        assert!((n.alpha1 / n.alpha0 - w.alpha1 / w.alpha0).abs() < 1e-9);
    }

    #[test]
    fn zero_model_posterior_is_half() {
        let m = ScorerModel::zeros(small_cfg()).unwrap();
        let img = GrayImage::from_fn(20, 40, |x, y| Luma([(x * 7 + y * 3) as u8]));
        assert_eq!(m.posterior(&img).unwrap(), 0.5);
    }

    #[test]
    fn single_positive_at_half_costs_ln2() {
        let r = cb_loss_and_grad_features(&[0.0], 0.0, &[vec![1.0]], &[1], &ClassWeights::uniform(), 0.0).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(r.grad_b, -0.5);
    }

    #[test]
    fn doubling_alpha1_doubles_positive_term() {
        let feats = vec![vec![0.3, -1.0], vec![1.2, 0.4]];
        let w = [0.5, -0.25];
        let base = ClassWeights::uniform();
        let doubled = ClassWeights { alpha1: 2.0, ..base };
        let pos = |wts: &ClassWeights| cb_loss_and_grad_features(&w, 0.1, &feats[..1], &[1], wts, 0.0).unwrap().loss;
        assert_eq!(pos(&doubled), 2.0 * pos(&base));
    }

    #[test]
    fn dimension_mismatch_is_incompatible() {
        let m = ScorerModel::zeros(small_cfg()).unwrap();
        assert!(matches!(m.posterior_features(&[0.0; 3]), Err(ScorerError::Incompatible(_))));
    }

    #[test]
    fn model_json_round_trip_and_tamper_check() {
        let mut m = ScorerModel::zeros(small_cfg()).unwrap();
        m.w = (0..8).map(|i| (i as f64 * 0.1f64).sin() / 3.0).collect();
        m.b = std::f64::consts::PI / 7.0;
        let m = ScorerModel::from_parts(m.feature_config, m.feature_means, m.feature_scales, m.w, m.b, 5, 0.25);
        let back = ScorerModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let tampered = m.to_json().replace("\"training_seed\":5", "\"training_seed\":6");
        assert!(ScorerModel::from_json(&tampered).is_err());
    }

    #[test]
    fn posterior_table_lookup() {
        let img = GrayImage::from_pixel(8, 8, Luma([9]));
        let text = format!("# imported\n{}\t0.75\n", image_key(&img));
        let t = PosteriorTable::parse("ext", &text).unwrap();
        assert_eq!(t.posterior(&img).unwrap(), 0.75);
        let other = GrayImage::from_pixel(8, 8, Luma([10]));
        assert!(matches!(t.posterior(&other), Err(ScorerError::UnknownImage(_))));
        assert!(PosteriorTable::parse("bad", "k\t1.0").is_err());
    }
}
