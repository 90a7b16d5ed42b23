//! Real/synthetic mixing ablation over precomputed feature pools.

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, ConfusionMatrix, EvalError, Metrics};
use crate::curator::{mix, stratified_split, Split, SplitSpec};
use crate::fixtures::{render, sample_specs, Style};
use crate::raster::to_gray;
use crate::scorer::{train_features, FeatureConfig, ScorerModel, TrainConfig};

/// Raw (unstandardized) feature vectors with labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeaturePool {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl FeaturePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (pos, self.len() - pos)
    }

    fn subset(&self, idx: &[usize]) -> FeaturePool {
        FeaturePool {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn featurize(images: &[(GrayImage, u8)], config: &FeatureConfig) -> Result<FeaturePool, EvalError> {
    let features = images.par_iter().map(|(g, _)| config.extract(g)).collect::<Result<Vec<_>, _>>()?;
    Ok(FeaturePool { features, labels: images.iter().map(|(_, y)| *y).collect() })
}

/// Training pools and the fixed real-style test pool.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub real_train: FeaturePool,
    pub syn_train: FeaturePool,
    pub test: FeaturePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub budget: usize,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub features: FeatureConfig,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            budget: 2240,
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..5).collect(),
            features: FeatureConfig { grid: (10, 4), ..FeatureConfig::default() },
            train: TrainConfig::default(),
        }
    }
}

/// Fixture pools for the desk-scale ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskPoolSpec {
    pub real: usize,
    pub real_bubble: usize,
    pub syn: usize,
    pub syn_bubble: usize,
    pub split: SplitSpec,
    pub seed: u64,
}

impl Default for DeskPoolSpec {
    fn default() -> Self {
        Self { real: 3202, real_bubble: 1701, syn: 2800, syn_bubble: 1400, split: SplitSpec::reference(), seed: 11 }
    }
}

fn render_pool(n: usize, n_bubble: usize, style: Style, seed: u64, config: &FeatureConfig) -> Result<FeaturePool, EvalError> {
    let specs = sample_specs(n, n_bubble as f64 / n as f64, style, seed).map_err(|e| EvalError::Fixture(e.to_string()))?;
    let rows = specs
        .par_iter()
        .map(|s| {
            let r = render(s).map_err(|e| EvalError::Fixture(e.to_string()))?;
            Ok((config.extract(&to_gray(&r.image))?, r.label))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let (features, labels) = rows.into_iter().unzip();
    Ok(FeaturePool { features, labels })
}

/// Renders real-style and synthetic-style fixtures, splits the real pool
/// and keeps its train and test parts.
pub fn desk_pools(spec: &DeskPoolSpec, config: &FeatureConfig) -> Result<Pools, EvalError> {
    if spec.real == 0 || spec.syn == 0 || spec.real_bubble > spec.real || spec.syn_bubble > spec.syn {
        return Err(EvalError::Invalid("pool sizes must be positive and class counts within them".into()));
    }
    let real = render_pool(spec.real, spec.real_bubble, Style::RealStyle, spec.seed, config)?;
    let syn = render_pool(spec.syn, spec.syn_bubble, Style::SynStyle, spec.seed.wrapping_add(1), config)?;
    let ids: Vec<(String, u8)> = real.labels.iter().enumerate().map(|(i, &y)| (format!("{i:06}"), y)).collect();
    let assignment = stratified_split(&ids, &spec.split, spec.seed)?;
    let pick = |s: Split| -> Vec<usize> { ids.iter().enumerate().filter(|(_, (id, _))| assignment[id] == s).map(|(i, _)| i).collect() };
    Ok(Pools { real_train: real.subset(&pick(Split::Train)), test: real.subset(&pick(Split::Test)), syn_train: syn })
}

pub fn evaluate_features(model: &ScorerModel, pool: &FeaturePool) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for (x, &y) in pool.features.iter().zip(&pool.labels) {
        let f = model.posterior_features(&model.standardize(x.clone())?)?;
        cm.add((f >= 0.5) as u8, y);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub synthetic_fraction: f64,
    /// Training composition as returned by the mix.
    pub syn: usize,
    pub real: usize,
    /// Means over seeds; optional metrics average the seeds where defined.
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    /// Mixing is class balanced within each source.
    pub stratified_mix: bool,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, fraction: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.synthetic_fraction == fraction)
    }
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// For every fraction and seed: mix, train, evaluate on the fixed test
/// pool. Runs are independent and execute in parallel.
pub fn run_ablation(config: &AblationConfig, pools: &Pools) -> Result<AblationTable, EvalError> {
    if config.fractions.is_empty() || config.seeds.is_empty() {
        return Err(EvalError::Invalid("need at least one fraction and one seed".into()));
    }
    if pools.test.is_empty() {
        return Err(EvalError::Empty);
    }
    config.features.validate()?;
    config.train.validate()?;
    let jobs: Vec<(usize, u64)> = (0..config.fractions.len()).flat_map(|i| config.seeds.iter().map(move |&s| (i, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let sel = mix(&pools.real_train.labels, &pools.syn_train.labels, config.budget, config.fractions[i], seed)?;
            let mut x = Vec::with_capacity(config.budget);
            let mut y = Vec::with_capacity(config.budget);
            for &j in &sel.syn {
                x.push(pools.syn_train.features[j].clone());
                y.push(pools.syn_train.labels[j]);
            }
            for &j in &sel.real {
                x.push(pools.real_train.features[j].clone());
                y.push(pools.real_train.labels[j]);
            }
            let model = train_features(&x, &y, config.features, &TrainConfig { seed, ..config.train })?;
            let cm = evaluate_features(&model, &pools.test)?;
            Ok((i, sel.composition(), SeedRun { seed, confusion: cm, metrics: metrics(&cm)?, final_loss: model.final_loss }))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let mut rows = Vec::with_capacity(config.fractions.len());
    for (i, &fraction) in config.fractions.iter().enumerate() {
        let mine: Vec<_> = results.iter().filter(|r| r.0 == i).collect();
        let (syn, real) = mine[0].1;
        let runs: Vec<SeedRun> = mine.iter().map(|r| r.2.clone()).collect();
        rows.push(AblationRow {
            synthetic_fraction: fraction,
            syn,
            real,
            accuracy: runs.iter().map(|r| r.metrics.accuracy).sum::<f64>() / runs.len() as f64,
            precision: mean_defined(runs.iter().map(|r| r.metrics.precision)),
            recall: mean_defined(runs.iter().map(|r| r.metrics.recall)),
            f1: mean_defined(runs.iter().map(|r| r.metrics.f1)),
            runs,
        });
    }
    Ok(AblationTable {
        budget: config.budget,
        seeds: config.seeds.clone(),
        test_size: pools.test.len(),
        stratified_mix: true,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.4}", x))
}

/// Human-readable mixing table, one row per synthetic fraction.
pub fn format_table(table: &AblationTable) -> String {
    let mut out = format!(
        "budget {}  seeds {:?}  test n={}\n{:>6}  {:>15}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        table.budget, table.seeds, table.test_size, "syn%", "train(syn:real)", "acc", "prec", "rec", "f1"
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{:>6}  {:>15}  {:>7.4}  {:>7}  {:>7}  {:>7}\n",
            format!("{}", r.synthetic_fraction * 100.0),
            format!("{}:{}", r.syn, r.real),
            r.accuracy,
            opt(r.precision),
            opt(r.recall),
            opt(r.f1)
        ));
    }
    out
}

/// One JSON object per row.
pub fn table_to_jsonl(table: &AblationTable) -> String {
    table.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pools() -> Pools {
        let cfg = AblationConfig::default().features;
        let spec = DeskPoolSpec {
            real: 120,
            real_bubble: 60,
            syn: 80,
            syn_bubble: 40,
            split: SplitSpec::Ratios { train: 0.6, val: 0.0, test: 0.4 },
            seed: 4,
        };
        desk_pools(&spec, &cfg).unwrap()
    }

    #[test]
    fn small_ablation_is_deterministic_and_composed_by_mix() {
        let pools = small_pools();
        let cfg = AblationConfig { budget: 60, seeds: vec![0, 1], train: TrainConfig { epochs: 20, ..TrainConfig::default() }, ..AblationConfig::default() };
        let a = run_ablation(&cfg, &pools).unwrap();
        let b = run_ablation(&cfg, &pools).unwrap();
        assert_eq!(a, b);
        let comps: Vec<(usize, usize)> = a.rows.iter().map(|r| (r.syn, r.real)).collect();
        assert_eq!(comps, vec![(0, 60), (15, 45), (30, 30), (45, 15), (60, 0)]);
        assert_eq!(a.test_size, 48);
        assert!(format_table(&a).contains("15:45"));
        assert_eq!(table_to_jsonl(&a).lines().count(), 5);
    }

    #[test]
    fn shortfall_surfaces_curator_error() {
        let pools = small_pools();
        let cfg = AblationConfig { budget: 500, seeds: vec![0], ..AblationConfig::default() };
        assert!(matches!(run_ablation(&cfg, &pools), Err(EvalError::Curator(_))));
    }
}
