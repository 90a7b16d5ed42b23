//! Deterministic procedural renderer of pipette-tip frames.
//!
//! Frames show a bright conical tip on a near-black backdrop with a tinted
//! liquid column filled from the apex upwards. Bubbles are dark disks with
//! a bright one-pixel rim. Two visual styles exist: `RealStyle` emulates the
//! camera (sensor noise, vignetting) and `SynStyle` emulates generator output
//! (clean, with strong specular highlights on the wall and on bubbles).
//!
//! Scale is 10 px per mm, so bubble diameters of 0.2 to 1.5 mm map to radii
//! of 1 to 8 px.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster;

/// Liquid colors used by the lab: two tip lengths crossed with these five.
pub const PALETTE: [(&str, [u8; 3]); 5] = [
    ("transparent", [214, 216, 220]),
    ("red", [226, 118, 112]),
    ("yellow", [228, 214, 104]),
    ("blue", [118, 148, 232]),
    ("green", [126, 212, 132]),
];

pub const MIN_BUBBLES: u32 = 1;
pub const MAX_BUBBLES: u32 = 15;
pub const MIN_BUBBLE_RADIUS_PX: u32 = 1;
pub const MAX_BUBBLE_RADIUS_PX: u32 = 8;

const BACKGROUND: [f32; 3] = [10.0, 10.0, 12.0];
const PLASTIC: [f32; 3] = [188.0, 190.0, 192.0];
const BUBBLE_RIM: f32 = 250.0;
const BUBBLE_FILL_GAIN: f32 = 0.55;

/// Looks up a palette color by name.
pub fn palette_color(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Style {
    RealStyle,
    SynStyle,
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::RealStyle => "REAL_STYLE",
            Style::SynStyle => "SYN_STYLE",
        })
    }
}

impl std::str::FromStr for Style {
    type Err = FixtureError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "real" | "real_style" => Ok(Style::RealStyle),
            "syn" | "syn_style" | "synthetic" => Ok(Style::SynStyle),
            other => Err(FixtureError::InvalidParameter(format!("unknown style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bubble {
    pub cx_px: i32,
    pub cy_px: i32,
    pub r_px: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub style: Style,
    pub liquid_color: [u8; 3],
    pub level_pct: f64,
    pub vertex_angle_deg: f64,
    /// Wall thickness: horizontal inset of the liquid from the silhouette.
    pub wall_offset_px: u32,
    pub bubbles: Vec<Bubble>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Horizontal displacement of the tip axis from the frame center.
    #[serde(default)]
    pub shift_x_px: i32,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
}

/// Tip geometry derived from a [`RenderSpec`], in continuous pixel
/// coordinates (pixel `(x, y)` covers `[x, x+1) x [y, y+1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipGeometry {
    pub apex_x: f64,
    pub apex_y: f64,
    pub top_y: f64,
    /// tan of half the vertex angle.
    pub slope: f64,
    pub wall: f64,
    pub level_y: f64,
}

impl TipGeometry {
    pub fn length(&self) -> f64 {
        self.apex_y - self.top_y
    }

    /// Outer half-width at height `y`, zero outside the tip rows.
    pub fn half_width(&self, y: f64) -> f64 {
        if y < self.top_y || y > self.apex_y {
            0.0
        } else {
            (self.apex_y - y) * self.slope
        }
    }

    pub fn inner_half_width(&self, y: f64) -> f64 {
        (self.half_width(y) - self.wall).max(0.0)
    }

    /// Whether the point lies in the liquid column.
    pub fn in_liquid(&self, x: f64, y: f64) -> bool {
        y >= self.level_y && y <= self.apex_y && (x - self.apex_x).abs() <= self.inner_half_width(y)
    }

    pub fn in_tip(&self, x: f64, y: f64) -> bool {
        (x - self.apex_x).abs() <= self.half_width(y)
    }

    /// Bounding box `(x0, y0, x1, y1)` of the silhouette (exclusive max).
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let hw = self.half_width(self.top_y);
        (self.apex_x - hw, self.top_y, self.apex_x + hw, self.apex_y)
    }
}

impl RenderSpec {
    pub fn geometry(&self) -> TipGeometry {
        let w = self.width_px as f64;
        let h = self.height_px as f64;
        let apex_y = (h - (0.06 * h).round()).max(1.0);
        let max_len = apex_y - (0.05 * h).round();
        let slope = (self.vertex_angle_deg.to_radians() / 2.0).tan();
        let len = max_len.min(0.3 * w / slope).max(1.0);
        let top_y = apex_y - len;
        TipGeometry {
            apex_x: w / 2.0 + self.shift_x_px as f64,
            apex_y,
            top_y,
            slope,
            wall: self.wall_offset_px as f64,
            level_y: apex_y - self.level_pct / 100.0 * len,
        }
    }

    pub fn label(&self) -> u8 {
        u8::from(!self.bubbles.is_empty())
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        if self.width_px < 8 || self.height_px < 8 {
            return Err(FixtureError::InvalidParameter(format!(
                "frame {}x{} is smaller than 8x8",
                self.width_px, self.height_px
            )));
        }
        if !(self.vertex_angle_deg > 5.0 && self.vertex_angle_deg < 90.0) {
            return Err(FixtureError::InvalidParameter(format!(
                "vertex angle {} outside (5, 90)",
                self.vertex_angle_deg
            )));
        }
        if !(0.0..=100.0).contains(&self.level_pct) {
            return Err(FixtureError::InvalidParameter(format!(
                "level {}% outside [0, 100]",
                self.level_pct
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(FixtureError::InvalidParameter("noise sigma must be >= 0".into()));
        }
        if self.level_pct == 0.0 && !self.bubbles.is_empty() {
            return Err(FixtureError::InvalidGeometry("empty tip cannot hold bubbles".into()));
        }
        let geo = self.geometry();
        for (i, b) in self.bubbles.iter().enumerate() {
            if b.r_px < 1 {
                return Err(FixtureError::InvalidGeometry(format!("bubble {i} has radius 0")));
            }
            if !geo.in_liquid(b.cx_px as f64 + 0.5, b.cy_px as f64 + 0.5) {
                return Err(FixtureError::InvalidGeometry(format!(
                    "bubble {i} center ({}, {}) lies outside the liquid column",
                    b.cx_px, b.cy_px
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        raster::sha256_hex(&serde_json::to_vec(self).expect("RenderSpec serializes"))
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: RgbImage,
    pub label: u8,
}

/// Fraction of the pixel span `[x, x+1)` covered by `[lo, hi]`.
#[inline]
fn span_coverage(x: f64, lo: f64, hi: f64) -> f32 {
    ((x + 1.0).min(hi) - x.max(lo)).clamp(0.0, 1.0) as f32
}

#[inline]
fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

pub fn render(spec: &RenderSpec) -> Result<Rendered, FixtureError> {
    spec.validate()?;
    let (w, h) = (spec.width_px as usize, spec.height_px as usize);
    let geo = spec.geometry();
    let liquid = spec.liquid_color.map(|c| c as f32);
    let mut buf = vec![0f32; w * h * 3];

    for y in 0..h {
        let yc = y as f64 + 0.5;
        let row = &mut buf[y * w * 3..(y + 1) * w * 3];
        let hw = geo.half_width(yc);
        if hw <= 0.0 {
            for px in row.chunks_exact_mut(3) {
                px.copy_from_slice(&BACKGROUND);
            }
            continue;
        }
        let (lo, hi) = (geo.apex_x - hw, geo.apex_x + hw);
        let inner = geo.inner_half_width(yc);
        let (ilo, ihi) = (geo.apex_x - inner, geo.apex_x + inner);
        // vertical coverage of the liquid surface within this row
        let level_cov = ((y as f64 + 1.0) - geo.level_y).clamp(0.0, 1.0) as f32;
        let meniscus = yc >= geo.level_y && yc < geo.level_y + 3.0;
        for (x, px) in row.chunks_exact_mut(3).enumerate() {
            let xf = x as f64;
            let tip = span_coverage(xf, lo, hi);
            let mut c = mix(BACKGROUND, PLASTIC, tip);
            if inner > 0.0 && level_cov > 0.0 {
                let liq = span_coverage(xf, ilo, ihi) * level_cov;
                if liq > 0.0 {
                    let tint = if meniscus { liquid.map(|v| v * 0.85) } else { liquid };
                    c = mix(c, tint, liq);
                }
            }
            px.copy_from_slice(&c);
        }
    }

    draw_bubbles(spec, &geo, &mut buf, w, h);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.style {
        Style::SynStyle => apply_highlight(&geo, &mut buf, w, h),
        Style::RealStyle => apply_vignette(&mut buf, w, h),
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma as f32)
            .map_err(|e| FixtureError::InvalidParameter(e.to_string()))?;
        for px in buf.chunks_exact_mut(3) {
            let n = normal.sample(&mut rng);
            px.iter_mut().for_each(|v| *v += n);
        }
    }

    let raw: Vec<u8> = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let image = RgbImage::from_raw(spec.width_px, spec.height_px, raw).expect("buffer size matches");
    Ok(Rendered { image, label: spec.label() })
}

fn draw_bubbles(spec: &RenderSpec, geo: &TipGeometry, buf: &mut [f32], w: usize, h: usize) {
    let rim = match spec.style {
        Style::RealStyle => BUBBLE_RIM,
        Style::SynStyle => 255.0,
    };
    for b in &spec.bubbles {
        let r = b.r_px as i64;
        let (cx, cy) = (b.cx_px as i64, b.cy_px as i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if !geo.in_liquid(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                let d2 = (x - cx).pow(2) + (y - cy).pow(2);
                if d2 > r * r {
                    continue;
                }
                let i = (y as usize * w + x as usize) * 3;
                let px = &mut buf[i..i + 3];
                if (d2 as f64).sqrt() > (r - 1) as f64 {
                    px.fill(rim);
                } else {
                    px.iter_mut().for_each(|v| *v *= BUBBLE_FILL_GAIN);
                }
            }
        }
        if spec.style == Style::SynStyle {
            // specular glint in the upper-left of each bubble
            let gr = (r / 3).max(1);
            let (gx, gy) = (cx - r / 2, cy - r / 2);
            for y in (gy - gr).max(0)..=(gy + gr).min(h as i64 - 1) {
                for x in (gx - gr).max(0)..=(gx + gr).min(w as i64 - 1) {
                    if (x - gx).pow(2) + (y - gy).pow(2) <= gr * gr
                        && geo.in_liquid(x as f64 + 0.5, y as f64 + 0.5)
                    {
                        let i = (y as usize * w + x as usize) * 3;
                        buf[i..i + 3].fill(255.0);
                    }
                }
            }
        }
    }
}

/// Soft vertical specular streak along the right wall.
fn apply_highlight(geo: &TipGeometry, buf: &mut [f32], w: usize, h: usize) {
    for y in 0..h {
        let yc = y as f64 + 0.5;
        let hw = geo.half_width(yc);
        if hw < 4.0 {
            continue;
        }
        let center = geo.apex_x + 0.5 * hw;
        let width = (0.12 * hw).max(1.5);
        let x0 = ((center - 3.0 * width).floor().max(0.0)) as usize;
        let x1 = ((center + 3.0 * width).ceil().min(w as f64 - 1.0)) as usize;
        for x in x0..=x1 {
            let xc = x as f64 + 0.5;
            if !geo.in_tip(xc, yc) {
                continue;
            }
            let g = (-(xc - center).powi(2) / (2.0 * width * width)).exp() as f32;
            let i = (y * w + x) * 3;
            buf[i..i + 3].iter_mut().for_each(|v| *v += 45.0 * g);
        }
    }
}

fn apply_vignette(buf: &mut [f32], w: usize, h: usize) {
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let rmax2 = cx * cx + cy * cy;
    let col: Vec<f32> = (0..w).map(|x| (x as f32 + 0.5 - cx).powi(2) / rmax2).collect();
    for y in 0..h {
        let ry = (y as f32 + 0.5 - cy).powi(2) / rmax2;
        let row = &mut buf[y * w * 3..(y + 1) * w * 3];
        for (px, cx2) in row.chunks_exact_mut(3).zip(&col) {
            let f = 1.0 - 0.25 * (ry + cx2);
            px.iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Binary silhouette of the tip as rendered (pixel centers inside the cone).
pub fn silhouette_mask(spec: &RenderSpec) -> GrayImage {
    let geo = spec.geometry();
    GrayImage::from_fn(spec.width_px, spec.height_px, |x, y| {
        let inside = geo.in_tip(x as f64 + 0.5, y as f64 + 0.5);
        Luma([if inside { 255 } else { 0 }])
    })
}

/// Draws `n` specs; `round(n * class_balance)` of them carry bubbles.
pub fn sample_specs(
    n: usize,
    class_balance: f64,
    style: Style,
    rng_seed: u64,
) -> Result<Vec<RenderSpec>, FixtureError> {
    if n == 0 {
        return Err(FixtureError::InvalidParameter("n must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&class_balance) {
        return Err(FixtureError::InvalidParameter(format!(
            "class balance {class_balance} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_bubble = (n as f64 * class_balance).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_bubble).collect();
    labels.shuffle(&mut rng);

    Ok(labels
        .into_iter()
        .map(|with_bubbles| sample_one(&mut rng, style, with_bubbles))
        .collect())
}

/// Spec with the given appearance factors; geometry, bubble placement and
/// noise come from `seed`. Tip shift scales with the frame width.
pub fn spec_from_factors(
    style: Style,
    liquid_color: [u8; 3],
    level_pct: f64,
    bubble_count: u32,
    seed: u64,
    width_px: u32,
    height_px: u32,
) -> Result<RenderSpec, FixtureError> {
    if bubble_count > MAX_BUBBLES {
        return Err(FixtureError::InvalidParameter(format!("bubble count {bubble_count} above {MAX_BUBBLES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_shift = (20 * width_px / raster::TARGET_WIDTH) as i32;
    let mut spec = RenderSpec {
        width_px,
        height_px,
        style,
        liquid_color,
        level_pct,
        vertex_angle_deg: rng.random_range(15.0..35.0),
        wall_offset_px: rng.random_range(3..=8).min(width_px / 40).max(1),
        bubbles: Vec::new(),
        noise_sigma: match style {
            Style::RealStyle => rng.random_range(3.0..5.0),
            Style::SynStyle => 1.0,
        },
        seed: rng.random(),
        shift_x_px: rng.random_range(-max_shift..=max_shift),
    };
    if bubble_count > 0 {
        let geo = spec.geometry();
        spec.bubbles = (0..bubble_count).map(|_| place_bubble(&mut rng, &geo)).collect();
    }
    spec.validate()?;
    Ok(spec)
}

fn sample_one(rng: &mut ChaCha8Rng, style: Style, with_bubbles: bool) -> RenderSpec {
    let (_, color) = PALETTE[rng.random_range(0..PALETTE.len())];
    let mut spec = RenderSpec {
        width_px: raster::TARGET_WIDTH,
        height_px: raster::TARGET_HEIGHT,
        style,
        liquid_color: color,
        level_pct: rng.random_range(20..=90) as f64,
        vertex_angle_deg: rng.random_range(15.0..35.0),
        wall_offset_px: rng.random_range(3..=8),
        bubbles: Vec::new(),
        noise_sigma: match style {
            Style::RealStyle => rng.random_range(3.0..5.0),
            Style::SynStyle => 1.0,
        },
        seed: rng.random(),
        shift_x_px: rng.random_range(-20..=20),
    };
    if with_bubbles {
        let count = rng.random_range(MIN_BUBBLES..=MAX_BUBBLES);
        let geo = spec.geometry();
        spec.bubbles = (0..count).map(|_| place_bubble(rng, &geo)).collect();
    }
    spec
}

fn place_bubble(rng: &mut ChaCha8Rng, geo: &TipGeometry) -> Bubble {
    let r = rng.random_range(MIN_BUBBLE_RADIUS_PX..=MAX_BUBBLE_RADIUS_PX);
    let hw = geo.inner_half_width(geo.level_y.max(geo.top_y));
    let (x0, x1) = (geo.apex_x - hw, geo.apex_x + hw);
    let (y0, y1) = (geo.level_y, geo.apex_y);
    let mut margin = r as f64;
    loop {
        for _ in 0..200 {
            let x = rng.random_range(x0..x1.max(x0 + 1.0)).floor();
            let y = rng.random_range(y0..y1.max(y0 + 1.0)).floor();
            let (xc, yc) = (x + 0.5, y + 0.5);
            let fits = geo.in_liquid(xc, yc)
                && geo.in_liquid(xc - margin, yc)
                && geo.in_liquid(xc + margin, yc)
                && geo.in_liquid(xc, yc - margin)
                && geo.in_liquid(xc, yc + margin);
            if fits {
                return Bubble { cx_px: x as i32, cy_px: y as i32, r_px: r };
            }
        }
        if margin == 0.0 {
            // degenerate column; fall back to the deepest liquid pixel on the axis
            let y = (geo.apex_y - geo.wall / geo.slope - 1.0).max(geo.level_y).floor();
            return Bubble { cx_px: geo.apex_x.floor() as i32, cy_px: y as i32, r_px: 1 };
        }
        margin = (margin / 2.0).floor();
    }
}

/// One line of the ground-truth sidecar written next to generated fixtures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthLine {
    pub path: PathBuf,
    pub label: u8,
    pub spec_digest: String,
}

impl fmt::Display for GroundTruthLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.path.display(), self.label, self.spec_digest)
    }
}

pub const SIDECAR_FILE: &str = "ground_truth.tsv";

/// Renders every spec to `out_dir/fixture_NNNNNN.png` and writes the
/// tab-separated sidecar `path<TAB>label<TAB>spec_digest`.
pub fn generate_to_dir(specs: &[RenderSpec], out_dir: &Path) -> Result<Vec<GroundTruthLine>, FixtureError> {
    fs::create_dir_all(out_dir)?;
    let mut lines = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let rendered = render(spec)?;
        let path = out_dir.join(format!("fixture_{i:06}.png"));
        let bytes = raster::encode_png(&DynamicImage::ImageRgb8(rendered.image))?;
        fs::write(&path, bytes)?;
        lines.push(GroundTruthLine { path, label: rendered.label, spec_digest: spec.digest() });
    }
    let mut sidecar = io::BufWriter::new(fs::File::create(out_dir.join(SIDECAR_FILE))?);
    for line in &lines {
        writeln!(sidecar, "{line}")?;
    }
    sidecar.flush()?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn base_spec() -> RenderSpec {
        RenderSpec {
            width_px: 600,
            height_px: 1500,
            style: Style::RealStyle,
            liquid_color: [214, 216, 220],
            level_pct: 60.0,
            vertex_angle_deg: 25.0,
            wall_offset_px: 5,
            bubbles: vec![],
            noise_sigma: 3.0,
            seed: 7,
            shift_x_px: 0,
        }
    }

    #[test]
    fn empty_bubble_list_is_label_zero() {
        let r = render(&base_spec()).unwrap();
        assert_eq!(r.label, 0);
        assert_eq!(r.image.dimensions(), (600, 1500));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut spec = base_spec();
        spec.bubbles.push(Bubble { cx_px: 300, cy_px: 1300, r_px: 4 });
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.label, 1);
    }

    #[test]
    fn bubble_outside_liquid_is_rejected() {
        let mut spec = base_spec();
        spec.bubbles.push(Bubble { cx_px: 5, cy_px: 5, r_px: 3 });
        let err = render(&spec).unwrap_err();
        assert!(matches!(err, FixtureError::InvalidGeometry(_)), "{err}");
    }

    #[test]
    fn empty_tip_with_bubbles_is_rejected() {
        let mut spec = base_spec();
        spec.level_pct = 0.0;
        spec.bubbles.push(Bubble { cx_px: 300, cy_px: 1390, r_px: 1 });
        assert!(render(&spec).is_err());
    }

    #[test]
    fn background_is_dark_and_tip_is_bright() {
        let mut spec = base_spec();
        spec.noise_sigma = 0.0;
        let img = raster::to_gray(&render(&spec).unwrap().image);
        assert!(img.get_pixel(5, 5)[0] < 20);
        let geo = spec.geometry();
        let y = (geo.top_y + 10.0) as u32;
        assert!(img.get_pixel(geo.apex_x as u32, y)[0] > 120);
    }

    #[test]
    fn styles_differ_in_noise_and_highlight() {
        let mut real = base_spec();
        real.noise_sigma = 4.0;
        let mut syn = real.clone();
        syn.style = Style::SynStyle;
        syn.noise_sigma = 1.0;
        let rg = raster::to_gray(&render(&real).unwrap().image);
        let sg = raster::to_gray(&render(&syn).unwrap().image);
        // background noise measured in a corner patch
        let sd = |g: &GrayImage| {
            let vals: Vec<f64> = (0..40)
                .flat_map(|y| (0..40).map(move |x| (x, y)))
                .map(|(x, y)| g.get_pixel(x + 30, y + 300)[0] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        assert!(sd(&rg) > 2.0 * sd(&sg));
        assert!(sg.pixels().map(|p| p[0]).max() > rg.pixels().map(|p| p[0]).max());
    }

    #[test]
    fn zero_balance_means_no_bubbles() {
        let specs = sample_specs(10, 0.0, Style::RealStyle, 1).unwrap();
        assert_eq!(specs.len(), 10);
        assert!(specs.iter().all(|s| s.bubbles.is_empty()));
    }

    #[test]
    fn half_balance_gives_exact_count_in_range() {
        let specs = sample_specs(100, 0.5, Style::SynStyle, 42).unwrap();
        let bubbly: Vec<_> = specs.iter().filter(|s| !s.bubbles.is_empty()).collect();
        assert_eq!(bubbly.len(), 50);
        for s in &bubbly {
            assert!((1..=15).contains(&s.bubbles.len()));
            s.validate().unwrap();
        }
    }

    #[test]
    fn bubble_counts_are_uniform() {
        let specs = sample_specs(1000, 0.5, Style::RealStyle, 2024).unwrap();
        let mut hist = [0usize; 15];
        for s in specs.iter().filter(|s| !s.bubbles.is_empty()) {
            hist[s.bubbles.len() - 1] += 1;
        }
        let total: usize = hist.iter().sum();
        assert_eq!(total, 500);
        let expected = total as f64 / 15.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 14 degrees of freedom, alpha = 0.01
        assert!(chi2 < 29.141, "chi2 = {chi2}, hist = {hist:?}");
    }

    #[test]
    fn sampled_specs_are_renderable() {
        for spec in sample_specs(6, 0.5, Style::RealStyle, 3).unwrap() {
            let r = render(&spec).unwrap();
            assert_eq!(r.label, spec.label());
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(sample_specs(0, 0.5, Style::RealStyle, 1).is_err());
        assert!(sample_specs(5, 1.5, Style::RealStyle, 1).is_err());
        let mut spec = base_spec();
        spec.vertex_angle_deg = 95.0;
        assert!(spec.validate().is_err());
    }
}
