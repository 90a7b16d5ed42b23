//! Metrics, the mixing ablation and acceptance/cost accounting.

mod ablation;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{
    desk_pools, evaluate_features, featurize, format_table, run_ablation, table_to_jsonl, AblationConfig, AblationRow,
    AblationTable, DeskPoolSpec, FeaturePool, Pools, SeedRun,
};

use crate::curator::CuratorError;
use crate::scorer::ScorerError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Curator(#[from] CuratorError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("fixture rendering failed: {0}")]
    Fixture(String),
}

/// Label 1 (bubble) is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn add(&mut self, predicted: u8, actual: u8) {
        match (predicted == 1, actual == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Result<Self, EvalError> {
        let mut cm = Self::default();
        for (p, y) in pairs {
            if p > 1 || y > 1 {
                return Err(EvalError::Invalid(format!("labels must be 0 or 1, got ({p}, {y})")));
            }
            cm.add(p, y);
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: u64,
    pub accuracy: f64,
    /// Absent when nothing was predicted positive.
    pub precision: Option<f64>,
    /// Absent when there are no positives.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Harmonic mean; absent when either input is absent or both are zero.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let n = cm.total();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let div = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let precision = div(cm.tp, cm.tp + cm.fp);
    let recall = div(cm.tp, cm.tp + cm.fn_);
    Ok(Metrics { n, accuracy: (cm.tp + cm.tn) as f64 / n as f64, precision, recall, f1: f1_score(precision, recall) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub generated: u64,
    pub kept: u64,
    pub acceptance_rate: f64,
    pub total_cost: Option<f64>,
    /// Cost per generated candidate.
    pub unit_cost: Option<f64>,
    pub cost_per_accepted: Option<f64>,
    pub audits: u64,
    pub routed: u64,
    pub audit_fraction: Option<f64>,
}

pub fn cost_report(generated: u64, kept: u64, total_cost: Option<f64>, audits: u64, routed: u64) -> Result<CostReport, EvalError> {
    if generated == 0 {
        return Err(EvalError::Empty);
    }
    if kept > generated {
        return Err(EvalError::Invalid(format!("kept {kept} exceeds generated {generated}")));
    }
    if audits > routed {
        return Err(EvalError::Invalid(format!("audits {audits} exceed routed {routed}")));
    }
    if let Some(c) = total_cost.filter(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(EvalError::Invalid(format!("total cost {c} must be finite and non-negative")));
    }
    Ok(CostReport {
        generated,
        kept,
        acceptance_rate: kept as f64 / generated as f64,
        total_cost,
        unit_cost: total_cost.map(|c| c / generated as f64),
        cost_per_accepted: total_cost.filter(|_| kept > 0).map(|c| c / kept as f64),
        audits,
        routed,
        audit_fraction: (routed > 0).then(|| audits as f64 / routed as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_on_reference_test_counts() {
        let m = metrics(&ConfusionMatrix::new(255, 0, 225, 0)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn degenerate_denominators() {
        let m = metrics(&ConfusionMatrix::new(0, 0, 10, 5)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (None, Some(0.0), None));
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(EvalError::Empty)));
    }

    #[test]
    fn pairs_and_counts_agree() {
        let pairs = [(1, 1), (1, 0), (0, 0), (0, 1), (1, 1), (0, 0), (0, 0)];
        let cm = ConfusionMatrix::from_pairs(pairs).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2, 1, 3, 1));
        assert!(ConfusionMatrix::from_pairs([(2, 0)]).is_err());
    }

    #[test]
    fn cost_report_everything_kept() {
        let r = cost_report(50, 50, Some(5.0), 0, 0).unwrap();
        assert_eq!(r.acceptance_rate, 1.0);
        assert_eq!(r.audit_fraction, None);
        assert!(cost_report(10, 11, None, 0, 0).is_err());
        assert!(cost_report(10, 5, None, 3, 2).is_err());
    }
}
