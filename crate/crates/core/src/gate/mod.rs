//! Image quality gate.
//!
//! The tip ROI is segmented with a global Otsu threshold, then checked for
//! area ratio, vertex angle, side straightness (Hough) and edge sharpness.
//! Each raw measurement is mapped through a clamped linear ramp into
//! `[0, 1]`; the scalar quality `q` is the minimum subscore, or zero when no
//! ROI is found.

mod geometry;
mod otsu;
mod roi;

use std::collections::BTreeMap;
use std::fmt;

use image::GrayImage;
use serde::{Deserialize, Serialize};

pub use geometry::{hough_dominant_line, side_straightness, vertex_angle, Line};
pub use otsu::{histogram, otsu_threshold, Histogram, OtsuThreshold};
pub use roi::{extract_roi, BBox, Mask, RoiExtraction};

use crate::raster::{self, RasterError};

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("invalid gate configuration: {0}")]
    InvalidConfig(String),
    #[error("undecodable image: {0}")]
    Undecodable(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub tau_q: f64,
    pub roi_area_ratio_bounds: (f64, f64),
    pub vertex_angle_bounds_deg: (f64, f64),
    pub straightness_tol: f64,
    /// Floor for mean squared gradient on the ROI boundary; the subscore
    /// ramps from 0 at the floor to 1 at four times the floor.
    pub sharpness_min: f64,
    pub min_component_area_px: usize,
    /// Minimum bbox height/width of a candidate component.
    pub min_aspect_ratio: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau_q: 0.5,
            roi_area_ratio_bounds: (0.05, 0.6),
            vertex_angle_bounds_deg: (10.0, 60.0),
            straightness_tol: 0.02,
            sharpness_min: 500.0,
            min_component_area_px: 2000,
            min_aspect_ratio: 0.5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        let bad = |m: &str| Err(GateError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.tau_q) {
            return bad("tau_q must lie in [0, 1]");
        }
        if self.roi_area_ratio_bounds.0 >= self.roi_area_ratio_bounds.1 {
            return bad("roi_area_ratio_bounds must satisfy lo < hi");
        }
        if self.vertex_angle_bounds_deg.0 >= self.vertex_angle_bounds_deg.1 {
            return bad("vertex_angle_bounds_deg must satisfy lo < hi");
        }
        if self.straightness_tol <= 0.0 || self.sharpness_min <= 0.0 {
            return bad("straightness_tol and sharpness_min must be positive");
        }
        Ok(())
    }

    /// Whether a quality score passes the gate.
    pub fn passes(&self, q: f64) -> bool {
        q >= self.tau_q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcheck {
    RoiRatio,
    VertexAngle,
    Straightness,
    Sharpness,
}

impl fmt::Display for Subcheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subcheck::RoiRatio => "roi_ratio",
            Subcheck::VertexAngle => "vertex_angle",
            Subcheck::Straightness => "straightness",
            Subcheck::Sharpness => "sharpness",
        })
    }
}

/// Raw measurements behind the subscores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub roi_ratio: Option<f64>,
    pub vertex_angle_deg: Option<f64>,
    /// `None` encodes the "no supported line" sentinel.
    pub straightness: Option<f64>,
    pub sharpness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub q: f64,
    pub otsu_t: u8,
    pub roi_found: bool,
    pub roi_bbox: Option<BBox>,
    pub subscores: BTreeMap<Subcheck, f64>,
    #[serde(default)]
    pub measurements: Measurements,
}

/// 1 inside `[lo, hi]`, falling linearly to 0 over a margin of 20% of the
/// interval width on either side.
fn interval_ramp(v: f64, lo: f64, hi: f64) -> f64 {
    let margin = 0.2 * (hi - lo);
    if v < lo {
        ((v - (lo - margin)) / margin).clamp(0.0, 1.0)
    } else if v > hi {
        (((hi + margin) - v) / margin).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

/// 1 up to `tol`, 0 from `2*tol`.
fn straightness_ramp(residual: f64, tol: f64) -> f64 {
    if !residual.is_finite() {
        return 0.0;
    }
    ((2.0 * tol - residual) / tol).clamp(0.0, 1.0)
}

fn sharpness_ramp(energy: f64, floor: f64) -> f64 {
    ((energy - floor) / (3.0 * floor)).clamp(0.0, 1.0)
}

/// Mean squared central-difference gradient magnitude over the ROI boundary
/// pixels.
pub fn boundary_sharpness(gray: &GrayImage, mask: &Mask) -> f64 {
    let (w, h) = gray.dimensions();
    let px = |x: u32, y: u32| gray.get_pixel(x, y)[0] as f64;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !mask.is_boundary(x, y) {
                continue;
            }
            let gx = (px(x + 1, y) - px(x - 1, y)) / 2.0;
            let gy = (px(x, y + 1) - px(x, y - 1)) / 2.0;
            sum += gx * gx + gy * gy;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs every subcheck on a grayscale frame.
pub fn quality_score(gray: &GrayImage, config: &GateConfig) -> Result<GateReport, GateError> {
    let roi = extract_roi(gray, config)?;
    let mut report = GateReport {
        q: 0.0,
        otsu_t: roi.otsu.threshold,
        roi_found: roi.roi_found,
        roi_bbox: roi.bbox,
        subscores: BTreeMap::new(),
        measurements: Measurements::default(),
    };
    let Some(mask) = roi.mask else {
        return Ok(report);
    };

    let (w, h) = gray.dimensions();
    let ratio = mask.area() as f64 / (w as f64 * h as f64);
    let angle = vertex_angle(&mask);
    let straight = side_straightness(&mask);
    let sharp = boundary_sharpness(gray, &mask);
    report.measurements = Measurements {
        roi_ratio: Some(ratio),
        vertex_angle_deg: angle,
        straightness: straight.is_finite().then_some(straight),
        sharpness: Some(sharp),
    };

    let (alo, ahi) = config.roi_area_ratio_bounds;
    let (vlo, vhi) = config.vertex_angle_bounds_deg;
    report.subscores.insert(Subcheck::RoiRatio, interval_ramp(ratio, alo, ahi));
    report.subscores.insert(Subcheck::VertexAngle, angle.map_or(0.0, |a| interval_ramp(a, vlo, vhi)));
    report.subscores.insert(Subcheck::Straightness, straightness_ramp(straight, config.straightness_tol));
    report.subscores.insert(Subcheck::Sharpness, sharpness_ramp(sharp, config.sharpness_min));
    report.q = report.subscores.values().copied().fold(1.0, f64::min);
    Ok(report)
}

/// Decodes and scores an encoded image. Decode failures surface as
/// [`GateError::Undecodable`], distinct from a low score.
pub fn quality_score_bytes(bytes: &[u8], config: &GateConfig) -> Result<GateReport, GateError> {
    let img = raster::decode(bytes)?;
    quality_score(&raster::dynamic_to_gray(&img), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{render, RenderSpec, Style};
    use image::{DynamicImage, Luma};

    fn clean_spec(angle: f64) -> RenderSpec {
        RenderSpec {
            width_px: 600,
            height_px: 1500,
            style: Style::RealStyle,
            liquid_color: [118, 148, 232],
            level_pct: 50.0,
            vertex_angle_deg: angle,
            wall_offset_px: 5,
            bubbles: vec![],
            noise_sigma: 4.0,
            seed: 11,
            shift_x_px: 0,
        }
    }

    fn gray_of(spec: &RenderSpec) -> GrayImage {
        raster::to_gray(&render(spec).unwrap().image)
    }

    #[test]
    fn ramps() {
        assert_eq!(interval_ramp(30.0, 10.0, 60.0), 1.0);
        assert_eq!(interval_ramp(0.0, 10.0, 60.0), 0.0);
        assert!((interval_ramp(5.0, 10.0, 60.0) - 0.5).abs() < 1e-12);
        assert_eq!(straightness_ramp(f64::INFINITY, 0.02), 0.0);
        assert_eq!(straightness_ramp(0.01, 0.02), 1.0);
        assert_eq!(sharpness_ramp(2000.0, 500.0), 1.0);
        assert_eq!(sharpness_ramp(100.0, 500.0), 0.0);
    }

    #[test]
    fn black_frame_scores_zero() {
        let r = quality_score(&GrayImage::new(600, 1500), &GateConfig::default()).unwrap();
        assert_eq!(r.q, 0.0);
        assert!(!r.roi_found);
        assert!(r.subscores.is_empty());
    }

    #[test]
    fn clean_fixture_passes() {
        let r = quality_score(&gray_of(&clean_spec(25.0)), &GateConfig::default()).unwrap();
        assert!(r.roi_found);
        assert!(r.q >= 0.9, "{r:?}");
    }

    #[test]
    fn q_is_min_of_subscores() {
        let r = quality_score(&gray_of(&clean_spec(30.0)), &GateConfig::default()).unwrap();
        let min = r.subscores.values().copied().fold(1.0, f64::min);
        assert_eq!(r.q, min);
    }

    #[test]
    fn fixture_vertex_angle_matches_spec() {
        for angle in [25.0, 30.0] {
            let spec = clean_spec(angle);
            let roi = extract_roi(&gray_of(&spec), &GateConfig::default()).unwrap();
            let measured = vertex_angle(roi.mask.as_ref().unwrap()).unwrap();
            assert!((measured - angle).abs() <= 2.0, "{angle} -> {measured}");
        }
    }

    #[test]
    fn roi_bbox_covers_rendered_silhouette() {
        let spec = clean_spec(25.0);
        let roi = extract_roi(&gray_of(&spec), &GateConfig::default()).unwrap();
        let truth = Mask::from_fn(600, 1500, {
            let m = crate::fixtures::silhouette_mask(&spec);
            move |x, y| m.get_pixel(x, y)[0] > 0
        });
        let tb = truth.bbox().unwrap();
        let found = roi.bbox.unwrap();
        assert!(found.contains_box(&tb), "found {found:?} truth {tb:?}");
    }

    #[test]
    fn heavy_blur_fails_the_gate() {
        let cfg = GateConfig::default();
        let gray = gray_of(&clean_spec(25.0));
        let sharp = quality_score(&gray, &cfg).unwrap();
        let blurred = quality_score(&raster::gaussian_blur(&gray, 6.0), &cfg).unwrap();
        assert!(blurred.subscores[&Subcheck::Sharpness] < sharp.subscores[&Subcheck::Sharpness]);
        assert!(!cfg.passes(blurred.q), "{blurred:?}");
    }

    #[test]
    fn gray_and_rgb_inputs_agree() {
        let gray = gray_of(&clean_spec(20.0));
        let cfg = GateConfig::default();
        let direct = quality_score(&gray, &cfg).unwrap();
        let via_rgb = quality_score(&raster::to_gray(&raster::gray_to_rgb(&gray)), &cfg).unwrap();
        assert_eq!(direct, via_rgb);
        let bytes = raster::encode_png(&DynamicImage::ImageLuma8(gray)).unwrap();
        assert_eq!(quality_score_bytes(&bytes, &cfg).unwrap(), direct);
    }

    #[test]
    fn undecodable_is_distinct_from_low_quality() {
        let err = quality_score_bytes(b"\x89PNG garbage", &GateConfig::default()).unwrap_err();
        assert!(matches!(err, GateError::Undecodable(_)));
    }

    #[test]
    fn partition_on_tau() {
        let cfg = GateConfig::default();
        let mut g = GrayImage::new(50, 50);
        g.put_pixel(3, 3, Luma([9]));
        let r = quality_score(&g, &cfg).unwrap();
        assert!(cfg.passes(r.q) != (r.q < cfg.tau_q));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        let bad = GateConfig { roi_area_ratio_bounds: (0.5, 0.1), ..GateConfig::default() };
        assert!(bad.validate().is_err());
        let bad = GateConfig { tau_q: 1.5, ..GateConfig::default() };
        assert!(bad.validate().is_err());
    }
}
