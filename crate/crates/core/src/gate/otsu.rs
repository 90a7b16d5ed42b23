//! Otsu threshold over a 256-bin histogram.
//!
//! Between-class variance is compared exactly: for a threshold `t` with
//! `n0` pixels at or below it (intensity sum `s0`), `N` pixels in total and
//! intensity sum `S`, `N^2 * sigma_b^2 = (N*s0 - S*n0)^2 / (n0*n1)`. Ratios
//! are cross-multiplied in arbitrary precision so ties resolve identically
//! on every platform.

use std::cmp::Ordering;

use image::GrayImage;
use num_bigint::BigUint;

use super::GateError;

pub type Histogram = [u64; 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuThreshold {
    /// Pixels with intensity `> threshold` are foreground.
    pub threshold: u8,
    /// Set when no threshold separates two non-empty classes.
    pub degenerate: bool,
}

pub fn histogram(img: &GrayImage) -> Histogram {
    let mut hist = [0u64; 256];
    for &v in img.as_raw() {
        hist[v as usize] += 1;
    }
    hist
}

/// Smallest `t` maximizing the between-class variance.
pub fn otsu_threshold(hist: &Histogram) -> Result<OtsuThreshold, GateError> {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(GateError::EmptyHistogram);
    }
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();

    // best = (numerator, denominator) of N^2 * sigma_b^2
    let mut best: Option<(usize, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (t, &count) in hist.iter().enumerate() {
        n0 += count as u128;
        s0 += t as u128 * count as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (a, b) = (BigUint::from(total) * s0, BigUint::from(sum) * n0);
        let diff = if a >= b { a - b } else { b - a };
        let num = &diff * &diff;
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => (&num * bd).cmp(&(bn * &den)) == Ordering::Greater,
        };
        if better {
            best = Some((t, num, den));
        }
    }

    match best {
        Some((t, num, _)) if num > BigUint::ZERO => Ok(OtsuThreshold { threshold: t as u8, degenerate: false }),
        _ => {
            // a single occupied bin
            let bin = hist.iter().position(|&c| c > 0).expect("total > 0");
            Ok(OtsuThreshold { threshold: bin as u8, degenerate: true })
        }
    }
}
