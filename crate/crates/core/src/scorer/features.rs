//! Fixed feature map standing in for a learned backbone.
//!
//! Two blocks: a pooled-intensity grid (cell means scaled to `[0, 1]`) and,
//! optionally, a gradient-orientation histogram. The histogram counts Sobel
//! responses in 8 unsigned orientation bins for each of 5 magnitude bands
//! and reports `ln(1 + count)`.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::ScorerError;

pub const ORIENTATION_BINS: usize = 8;
/// Lower edges of the Sobel magnitude bands.
pub const MAGNITUDE_BANDS: [f64; 5] = [48.0, 100.0, 160.0, 250.0, 400.0];
pub const GRADIENT_FEATURES: usize = ORIENTATION_BINS * MAGNITUDE_BANDS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// `(rows, cols)` of the pooled-intensity grid.
    pub grid: (u32, u32),
    pub use_gradient_hist: bool,
    /// Z-score each feature with statistics from the training set.
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { grid: (80, 32), use_gradient_hist: true, standardize: true }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        let (r, c) = self.grid;
        if r == 0 || c == 0 || (r as usize) * (c as usize) < 2 {
            return Err(ScorerError::InvalidConfig(format!("grid {r}x{c} needs at least 2 cells")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        let (r, c) = self.grid;
        r as usize * c as usize + if self.use_gradient_hist { GRADIENT_FEATURES } else { 0 }
    }

    /// Raw (unstandardized) feature vector of a grayscale frame.
    pub fn extract(&self, gray: &GrayImage) -> Result<Vec<f64>, ScorerError> {
        self.validate()?;
        let (w, h) = gray.dimensions();
        let (rows, cols) = self.grid;
        if w < cols || h < rows {
            return Err(ScorerError::Incompatible(format!(
                "image {w}x{h} is smaller than the {rows}x{cols} grid"
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        pooled_grid(gray, rows, cols, &mut out);
        if self.use_gradient_hist {
            gradient_histogram(gray, &mut out);
        }
        Ok(out)
    }
}

fn pooled_grid(gray: &GrayImage, rows: u32, cols: u32, out: &mut Vec<f64>) {
    let (w, h) = gray.dimensions();
    let raw = gray.as_raw();
    // cell boundaries: floor(i * extent / cells)
    let xb: Vec<usize> = (0..=cols).map(|i| (i as u64 * w as u64 / cols as u64) as usize).collect();
    let yb: Vec<usize> = (0..=rows).map(|i| (i as u64 * h as u64 / rows as u64) as usize).collect();
    let mut sums = vec![0u64; (rows * cols) as usize];
    let mut col_of = vec![0usize; w as usize];
    for c in 0..cols as usize {
        col_of[xb[c]..xb[c + 1]].fill(c);
    }
    for r in 0..rows as usize {
        let cell_row = &mut sums[r * cols as usize..(r + 1) * cols as usize];
        for y in yb[r]..yb[r + 1] {
            let line = &raw[y * w as usize..(y + 1) * w as usize];
            for (x, &v) in line.iter().enumerate() {
                cell_row[col_of[x]] += v as u64;
            }
        }
    }
    for r in 0..rows as usize {
        for c in 0..cols as usize {
            let area = ((yb[r + 1] - yb[r]) * (xb[c + 1] - xb[c])) as f64;
            out.push(sums[r * cols as usize + c] as f64 / (255.0 * area));
        }
    }
}

fn gradient_histogram(gray: &GrayImage, out: &mut Vec<f64>) {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.as_raw();
    let mut counts = [0u64; GRADIENT_FEATURES];
    let band_sq: Vec<f64> = MAGNITUDE_BANDS.iter().map(|b| b * b).collect();
    let bin_width = std::f64::consts::PI / ORIENTATION_BINS as f64;
    for y in 1..h.saturating_sub(1) {
        let (up, mid, dn) = (&raw[(y - 1) * w..y * w], &raw[y * w..(y + 1) * w], &raw[(y + 1) * w..(y + 2) * w]);
        for x in 1..w - 1 {
            let p = |row: &[u8], dx: usize| row[x + dx - 1] as i32;
            let gx = (p(up, 2) + 2 * p(mid, 2) + p(dn, 2)) - (p(up, 0) + 2 * p(mid, 0) + p(dn, 0));
            let gy = (p(dn, 0) + 2 * p(dn, 1) + p(dn, 2)) - (p(up, 0) + 2 * p(up, 1) + p(up, 2));
            let m2 = (gx * gx + gy * gy) as f64;
            if m2 < band_sq[0] {
                continue;
            }
            let band = band_sq.iter().rposition(|&b| m2 >= b).unwrap();
            let mut angle = (gy as f64).atan2(gx as f64);
            if angle < 0.0 {
                angle += std::f64::consts::PI;
            }
            let bin = ((angle / bin_width) as usize).min(ORIENTATION_BINS - 1);
            counts[band * ORIENTATION_BINS + bin] += 1;
        }
    }
    out.extend(counts.iter().map(|&c| (c as f64).ln_1p()));
}
