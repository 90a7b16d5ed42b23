//! Mini-batch gradient descent on the class-balanced loss.

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cb_loss_and_grad_features, class_weights, FeatureConfig, ScorerError, ScorerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    /// Samples per step; 0 means full batch.
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Draw half of every mini-batch from each class.
    pub balanced_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { beta: 0.999, learning_rate: 0.1, epochs: 200, batch_size: 64, l2: 1e-4, seed: 0, balanced_batches: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ScorerError::InvalidConfig(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(ScorerError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(ScorerError::InvalidConfig(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ScorerError::InvalidConfig(format!("l2 {} must be >= 0", self.l2)));
        }
        Ok(())
    }
}

/// Per-feature mean and standard deviation of the training rows. Constant
/// features get scale 1. Identity when standardization is off.
pub fn standardization(raw: &[Vec<f64>], config: &FeatureConfig) -> (Vec<f64>, Vec<f64>) {
    let d = config.dim();
    if !config.standardize || raw.is_empty() {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let n = raw.len() as f64;
    let mut means = vec![0.0; d];
    for row in raw {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in raw {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    let scales = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (means, scales)
}

/// Endless reshuffled pass over a set of indices.
struct Stream {
    idx: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(idx: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut s = Stream { idx, pos: 0 };
        s.idx.shuffle(rng);
        s
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.idx.len() {
            self.idx.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.idx[self.pos - 1]
    }
}

/// Trains on precomputed raw feature rows (as returned by
/// [`FeatureConfig::extract`]).
pub fn train_features(
    raw: &[Vec<f64>],
    labels: &[u8],
    feature_config: FeatureConfig,
    config: &TrainConfig,
) -> Result<ScorerModel, ScorerError> {
    config.validate()?;
    feature_config.validate()?;
    if raw.len() != labels.len() {
        return Err(ScorerError::InvalidParameter(format!("{} rows but {} labels", raw.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(ScorerError::InvalidLabel(bad));
    }
    let d = feature_config.dim();
    if let Some(row) = raw.iter().find(|r| r.len() != d) {
        return Err(ScorerError::Incompatible(format!("feature row of length {} vs config dim {d}", row.len())));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(ScorerError::SingleClass { n0: neg.len(), n1: pos.len() });
    }
    let weights = class_weights(neg.len() as u64, pos.len() as u64, config.beta)?.normalized();

    let (means, scales) = standardization(raw, &feature_config);
    let x: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| row.iter().zip(&means).zip(&scales).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let n = x.len();
    let batch = if config.batch_size == 0 || config.batch_size >= n { n } else { config.batch_size };
    let steps_per_epoch = n.div_ceil(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut neg_stream = Stream::new(neg, &mut rng);
    let mut pos_stream = Stream::new(pos, &mut rng);
    let mut order: Vec<usize> = (0..n).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(batch);
    let mut ys: Vec<u8> = Vec::with_capacity(batch);
    for _ in 0..config.epochs {
        if batch == n {
            let g = cb_loss_and_grad_features(&w, b, &x, labels, &weights, config.l2)?;
            step(&mut w, &mut b, &g.grad_w, g.grad_b, config.learning_rate);
            continue;
        }
        if !config.balanced_batches {
            order.shuffle(&mut rng);
        }
        for s in 0..steps_per_epoch {
            rows.clear();
            ys.clear();
            if config.balanced_batches {
                // odd batch sizes alternate which class gets the extra sample
                let n_pos = if s % 2 == 0 { batch.div_ceil(2) } else { batch / 2 };
                for k in 0..batch {
                    let i = if k < n_pos { pos_stream.next(&mut rng) } else { neg_stream.next(&mut rng) };
                    rows.push(&x[i]);
                    ys.push(labels[i]);
                }
            } else {
                for &i in order.iter().skip(s * batch).take(batch) {
                    rows.push(&x[i]);
                    ys.push(labels[i]);
                }
            }
            let g = cb_loss_and_grad_features(&w, b, &rows, &ys, &weights, config.l2)?;
            step(&mut w, &mut b, &g.grad_w, g.grad_b, config.learning_rate);
        }
    }
    let final_loss = cb_loss_and_grad_features(&w, b, &x, labels, &weights, config.l2)?.loss;
    Ok(ScorerModel::from_parts(feature_config, means, scales, w, b, config.seed, final_loss))
}

fn step(w: &mut [f64], b: &mut f64, gw: &[f64], gb: f64, lr: f64) {
    for (wi, g) in w.iter_mut().zip(gw) {
        *wi -= lr * g;
    }
    *b -= lr * gb;
}

/// Extracts features from every image (in parallel) and trains on them.
pub fn train(
    dataset: &[(GrayImage, u8)],
    feature_config: FeatureConfig,
    config: &TrainConfig,
) -> Result<ScorerModel, ScorerError> {
    let raw = dataset
        .par_iter()
        .map(|(img, _)| feature_config.extract(img))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = dataset.iter().map(|(_, y)| *y).collect();
    train_features(&raw, &labels, feature_config, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg2() -> FeatureConfig {
        FeatureConfig { grid: (1, 2), use_gradient_hist: false, standardize: true }
    }

    fn clusters(n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut raw = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            raw.push(vec![0.2 + 0.1 * t, 0.7 - 0.2 * t]);
            ys.push(0);
            raw.push(vec![0.6 + 0.1 * t, 0.3 + 0.2 * t]);
            ys.push(1);
        }
        (raw, ys)
    }

    #[test]
    fn separable_clusters_reach_full_accuracy() {
        let (raw, ys) = clusters(50);
        let m = train_features(&raw, &ys, cfg2(), &TrainConfig { batch_size: 16, ..TrainConfig::default() }).unwrap();
        for (row, &y) in raw.iter().zip(&ys) {
            let f = m.posterior_features(&m.standardize(row.clone()).unwrap()).unwrap();
            assert_eq!((f >= 0.5) as u8, y);
        }
        assert!(m.final_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (raw, ys) = clusters(30);
        let c = TrainConfig { epochs: 20, seed: 7, batch_size: 8, ..TrainConfig::default() };
        let a = train_features(&raw, &ys, cfg2(), &c).unwrap();
        let b = train_features(&raw, &ys, cfg2(), &c).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let other = train_features(&raw, &ys, cfg2(), &TrainConfig { seed: 8, ..c }).unwrap();
        assert_ne!(a.w, other.w);
    }

    #[test]
    fn single_class_is_rejected() {
        let raw = vec![vec![0.0, 1.0]; 4];
        let err = train_features(&raw, &[1, 1, 1, 1], cfg2(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, ScorerError::SingleClass { n0: 0, n1: 4 }));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn full_batch_and_unbalanced_modes_train() {
        let (raw, ys) = clusters(20);
        for c in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { balanced_batches: false, batch_size: 8, ..TrainConfig::default() },
        ] {
            let m = train_features(&raw, &ys, cfg2(), &c).unwrap();
            let acc = raw
                .iter()
                .zip(&ys)
                .filter(|(r, &y)| ((m.posterior_features(&m.standardize((*r).clone()).unwrap()).unwrap() >= 0.5) as u8) == y)
                .count();
            assert_eq!(acc, raw.len());
        }
    }
}
