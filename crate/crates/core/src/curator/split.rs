//! Stratified splits of the real pool and the proportioned real/synthetic mix.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CuratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

/// Per-class counts, bubble first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub bubble: usize,
    pub no_bubble: usize,
}

impl ClassCounts {
    pub fn new(bubble: usize, no_bubble: usize) -> Self {
        Self { bubble, no_bubble }
    }

    pub fn get(&self, label: u8) -> usize {
        if label == 1 {
            self.bubble
        } else {
            self.no_bubble
        }
    }

    pub fn total(&self) -> usize {
        self.bubble + self.no_bubble
    }

    fn bump(&mut self, label: u8) {
        if label == 1 {
            self.bubble += 1;
        } else {
            self.no_bubble += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Exact per-class counts; records beyond them stay unassigned.
    Counts { train: ClassCounts, val: ClassCounts, test: ClassCounts },
    /// Per-class fractions; val and test are rounded, train takes the rest.
    Ratios { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    /// Train 1191/1051, val 255/225, test 255/225.
    pub fn reference() -> Self {
        SplitSpec::Counts {
            train: ClassCounts::new(1191, 1051),
            val: ClassCounts::new(255, 225),
            test: ClassCounts::new(255, 225),
        }
    }

    fn counts_for(&self, label: u8, available: usize) -> Result<[usize; 3], CuratorError> {
        match *self {
            SplitSpec::Counts { train, val, test } => Ok([train.get(label), val.get(label), test.get(label)]),
            SplitSpec::Ratios { train, val, test } => {
                if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(CuratorError::InvalidConfig(format!("split ratios {train}/{val}/{test} must sum to 1")));
                }
                let v = (val * available as f64).round() as usize;
                let t = (test * available as f64).round() as usize;
                let v = v.min(available);
                let t = t.min(available - v);
                Ok([available - v - t, v, t])
            }
        }
    }
}

/// Seeded per-class shuffle, then train, val and test are taken in order.
/// `records` are `(record_id, label)`; the result covers every record.
pub fn stratified_split(
    records: &[(String, u8)],
    spec: &SplitSpec,
    seed: u64,
) -> Result<BTreeMap<String, Split>, CuratorError> {
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, y) in records {
        if *y > 1 {
            return Err(CuratorError::InvalidLabel(*y));
        }
        by_class[*y as usize].push(id);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(CuratorError::InvalidConfig("split pool needs both classes".into()));
    }
    let mut shortfalls = Vec::new();
    let mut wanted = [[0usize; 3]; 2];
    for y in [1u8, 0] {
        let have = by_class[y as usize].len();
        wanted[y as usize] = spec.counts_for(y, have)?;
        let need: usize = wanted[y as usize].iter().sum();
        if need > have {
            shortfalls.push(format!("{}: need {need}, have {have} (short {})", class_name(y), need - have));
        }
    }
    if !shortfalls.is_empty() {
        return Err(CuratorError::Infeasible(shortfalls.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for y in [1u8, 0] {
        let ids = &mut by_class[y as usize];
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let [tr, va, te] = wanted[y as usize];
        for (i, id) in ids.iter().enumerate() {
            let split = if i < tr {
                Split::Train
            } else if i < tr + va {
                Split::Val
            } else if i < tr + va + te {
                Split::Test
            } else {
                Split::None
            };
            out.insert(id.to_string(), split);
        }
    }
    Ok(out)
}

fn class_name(y: u8) -> &'static str {
    if y == 1 {
        "bubble"
    } else {
        "no-bubble"
    }
}

/// Per-split, per-class counts of an assignment.
pub fn split_counts(assignment: &BTreeMap<String, Split>, labels: &BTreeMap<String, u8>) -> BTreeMap<Split, ClassCounts> {
    let mut out = BTreeMap::new();
    for (id, s) in assignment {
        if let Some(&y) = labels.get(id) {
            out.entry(*s).or_insert_with(ClassCounts::default).bump(y);
        }
    }
    out
}

pub trait Labeled {
    fn label(&self) -> u8;
}

impl Labeled for u8 {
    fn label(&self) -> u8 {
        *self
    }
}

impl<T: Labeled> Labeled for &T {
    fn label(&self) -> u8 {
        (*self).label()
    }
}

impl<A> Labeled for (A, u8) {
    fn label(&self) -> u8 {
        self.1
    }
}

/// Indices drawn from each pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSelection {
    pub real: Vec<usize>,
    pub syn: Vec<usize>,
}

impl MixSelection {
    pub fn composition(&self) -> (usize, usize) {
        (self.syn.len(), self.real.len())
    }
}

/// `n` indices without replacement, half from each class where the pool
/// allows and the remainder from the other class.
fn take_balanced<T: Labeled>(pool: &[T], n: usize, name: &str, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, CuratorError> {
    if n > pool.len() {
        return Err(CuratorError::PoolShortfall { pool: name.into(), needed: n, available: pool.len() });
    }
    let mut pos: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label() == 1).collect();
    let mut neg: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label() != 1).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut n_pos = n.div_ceil(2).min(pos.len());
    let n_neg = (n - n_pos).min(neg.len());
    n_pos = n - n_neg;
    let mut out: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    out.sort_unstable();
    Ok(out)
}

/// `round(budget * fraction)` synthetic and the rest real, each drawn
/// without replacement and class balanced.
pub fn mix<R: Labeled, S: Labeled>(
    real: &[R],
    syn: &[S],
    budget: usize,
    synthetic_fraction: f64,
    seed: u64,
) -> Result<MixSelection, CuratorError> {
    if !(0.0..=1.0).contains(&synthetic_fraction) {
        return Err(CuratorError::InvalidConfig(format!("synthetic fraction {synthetic_fraction} outside [0, 1]")));
    }
    let n_syn = (budget as f64 * synthetic_fraction).round() as usize;
    let n_real = budget - n_syn;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syn_idx = take_balanced(syn, n_syn, "synthetic", &mut rng)?;
    let real_idx = take_balanced(real, n_real, "real", &mut rng)?;
    Ok(MixSelection { real: real_idx, syn: syn_idx })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n1: usize, n0: usize) -> Vec<(String, u8)> {
        (0..n1).map(|i| (format!("b{i:05}"), 1)).chain((0..n0).map(|i| (format!("n{i:05}"), 0))).collect()
    }

    #[test]
    fn reference_counts() {
        let p = pool(1701, 1501);
        let a = stratified_split(&p, &SplitSpec::reference(), 7).unwrap();
        let labels: BTreeMap<String, u8> = p.iter().cloned().collect();
        let c = split_counts(&a, &labels);
        assert_eq!(c[&Split::Train], ClassCounts::new(1191, 1051));
        assert_eq!(c[&Split::Val], ClassCounts::new(255, 225));
        assert_eq!(c[&Split::Test], ClassCounts::new(255, 225));
        assert!(!c.contains_key(&Split::None));
        assert_eq!(a.len(), p.len());
    }

    #[test]
    fn seeds_change_membership_not_counts() {
        let p = pool(300, 200);
        let spec = SplitSpec::Ratios { train: 0.7, val: 0.15, test: 0.15 };
        let a = stratified_split(&p, &spec, 1).unwrap();
        assert_eq!(a, stratified_split(&p, &spec, 1).unwrap());
        let b = stratified_split(&p, &spec, 2).unwrap();
        assert_ne!(a, b);
        let labels: BTreeMap<String, u8> = p.iter().cloned().collect();
        assert_eq!(split_counts(&a, &labels), split_counts(&b, &labels));
    }

    #[test]
    fn infeasible_counts_report_shortfall() {
        let err = stratified_split(&pool(1000, 1501), &SplitSpec::reference(), 0).unwrap_err();
        assert!(err.to_string().contains("bubble: need 1701, have 1000 (short 701)"), "{err}");
    }

    #[test]
    fn leftovers_stay_unassigned() {
        let p = pool(10, 10);
        let spec = SplitSpec::Counts { train: ClassCounts::new(5, 5), val: ClassCounts::new(1, 1), test: ClassCounts::new(1, 1) };
        let a = stratified_split(&p, &spec, 0).unwrap();
        assert_eq!(a.values().filter(|s| **s == Split::None).count(), 6);
    }

    #[test]
    fn table_three_compositions() {
        let real: Vec<u8> = [vec![1u8; 1191], vec![0u8; 1051]].concat();
        let syn: Vec<u8> = [vec![1u8; 1120], vec![0u8; 1120]].concat();
        let got: Vec<(usize, usize)> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&f| mix(&real, &syn, 2240, f, 3).unwrap().composition())
            .collect();
        assert_eq!(got, vec![(0, 2240), (560, 1680), (1120, 1120), (1680, 560), (2240, 0)]);
    }

    #[test]
    fn mix_balances_and_reports_shortfall() {
        let real: Vec<u8> = [vec![1u8; 100], vec![0u8; 30]].concat();
        let syn: Vec<u8> = [vec![1u8; 50], vec![0u8; 50]].concat();
        let m = mix(&real, &syn, 100, 0.2, 1).unwrap();
        let syn_pos = m.syn.iter().filter(|&&i| syn[i] == 1).count();
        assert_eq!(syn_pos, 10);
        // real pool has only 30 negatives: take all of them
        assert_eq!(m.real.iter().filter(|&&i| real[i] == 0).count(), 30);
        let mut dedup = m.real.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 80);
        let err = mix(&real, &syn, 200, 0.75, 1).unwrap_err();
        assert!(matches!(err, CuratorError::PoolShortfall { ref pool, needed: 150, available: 100 } if pool == "synthetic"));
    }
}
