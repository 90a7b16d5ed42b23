//! Tip ROI extraction: global Otsu binarization plus connected components.

use std::collections::VecDeque;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::otsu::{histogram, otsu_threshold, OtsuThreshold};
use super::{GateConfig, GateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

/// Binary mask over a full frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width * height) as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 })
    }

    /// Leftmost and rightmost set column of every occupied row, as
    /// `(row, left, right)`.
    pub fn row_extents(&self) -> Vec<(u32, u32, u32)> {
        (0..self.height)
            .filter_map(|y| {
                let row = &self.bits[(y * self.width) as usize..((y + 1) * self.width) as usize];
                let l = row.iter().position(|&b| b)?;
                let r = row.iter().rposition(|&b| b)?;
                Some((y, l as u32, r as u32))
            })
            .collect()
    }

    /// Whether the set pixel lies next to an unset pixel (or the frame edge).
    pub fn is_boundary(&self, x: u32, y: u32) -> bool {
        if !self.get(x, y) {
            return false;
        }
        x == 0
            || y == 0
            || x + 1 == self.width
            || y + 1 == self.height
            || !self.get(x - 1, y)
            || !self.get(x + 1, y)
            || !self.get(x, y - 1)
            || !self.get(x, y + 1)
    }
}

#[derive(Debug, Clone)]
pub struct RoiExtraction {
    pub otsu: OtsuThreshold,
    pub roi_found: bool,
    pub mask: Option<Mask>,
    pub bbox: Option<BBox>,
}

struct Component {
    pixels: Vec<u32>,
    bbox: BBox,
}

/// 4-connected components of `fg`, in raster order of their first pixel.
fn components(fg: &[bool], width: u32, height: u32) -> Vec<Component> {
    let mut seen = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start as u32);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = (p % width, p / width);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            let mut visit = |q: u32| {
                if fg[q as usize] && !seen[q as usize] {
                    seen[q as usize] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        out.push(Component { pixels, bbox: BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 } });
    }
    out
}

/// Binarizes at the Otsu threshold and keeps the largest qualifying
/// component. A component qualifies when it has at least
/// `min_component_area_px` pixels, a bbox height/width ratio of at least
/// `min_aspect_ratio`, and does not touch the left, right or bottom frame
/// edge (a tip cut off by the field of view is not a valid ROI).
pub fn extract_roi(gray: &GrayImage, config: &GateConfig) -> Result<RoiExtraction, GateError> {
    let (w, h) = gray.dimensions();
    let otsu = otsu_threshold(&histogram(gray))?;
    let none = RoiExtraction { otsu, roi_found: false, mask: None, bbox: None };
    if otsu.degenerate {
        return Ok(none);
    }
    let fg: Vec<bool> = gray.as_raw().iter().map(|&v| v > otsu.threshold).collect();

    let best = components(&fg, w, h)
        .into_iter()
        .filter(|c| {
            let b = c.bbox;
            c.pixels.len() >= config.min_component_area_px
                && (b.h as f64 / b.w as f64) >= config.min_aspect_ratio
                && b.x > 0
                && b.x + b.w < w
                && b.y + b.h < h
        })
        .max_by(|a, b| a.pixels.len().cmp(&b.pixels.len()).then(b.pixels[0].cmp(&a.pixels[0])));

    Ok(match best {
        None => none,
        Some(c) => {
            let mut mask = Mask::new(w, h);
            for p in c.pixels {
                mask.bits[p as usize] = true;
            }
            RoiExtraction { otsu, roi_found: true, mask: Some(mask), bbox: Some(pad(c.bbox, w, h)) }
        }
    })
}

/// Grows a box by one pixel on each side, clamped to the frame, so that
/// anti-aliased edge pixels below the threshold are still covered.
fn pad(b: BBox, width: u32, height: u32) -> BBox {
    let (x, y) = (b.x.saturating_sub(1), b.y.saturating_sub(1));
    let (x1, y1) = ((b.x + b.w + 1).min(width), (b.y + b.h + 1).min(height));
    BBox { x, y, w: x1 - x, h: y1 - y }
}
