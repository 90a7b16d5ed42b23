//! Transport abstraction over the batch generator and a local mock that
//! answers each request with a procedurally rendered frame.

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::batch::{encode_result_error, encode_result_image, BatchLine};
use super::{Intent, SynthError};
use crate::fixtures::{self, palette_color, Style, MAX_BUBBLES, MIN_BUBBLES};
use crate::raster;

/// Submits a request file and returns the result file.
pub trait Transport {
    fn run(&self, batch_jsonl: &str) -> Result<String, SynthError>;
}

/// Renders synthetic-style fixtures from the prompt factors. Failure modes
/// are injected per request, seeded by the request's nonce and key:
/// `flip_rate` ignores the intended class, `degrade_rate` returns a heavily
/// blurred frame, `error_rate` returns an error line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockTransport {
    pub width_px: u32,
    pub height_px: u32,
    pub flip_rate: f64,
    pub degrade_rate: f64,
    pub error_rate: f64,
}

impl MockTransport {
    pub fn new(width_px: u32, height_px: u32) -> Self {
        Self { width_px, height_px, flip_rate: 0.0, degrade_rate: 0.0, error_rate: 0.0 }
    }

    fn answer(&self, raw: &str) -> Option<String> {
        let line: BatchLine = serde_json::from_str(raw).ok()?;
        let spec = match line.to_spec() {
            Ok(s) => s,
            Err(m) => return Some(encode_result_error(&line.key, 400, &m)),
        };
        let key_hash = line.key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed_nonce ^ key_hash);
        if rng.random::<f64>() < self.error_rate {
            return Some(encode_result_error(&line.key, 500, "mock generator failure"));
        }
        let flip = rng.random::<f64>() < self.flip_rate;
        let degrade = rng.random::<f64>() < self.degrade_rate;
        let rendered_intent = match (spec.intent, flip) {
            (i, false) => i,
            (Intent::Bubble, true) => Intent::NoBubble,
            (Intent::NoBubble, true) => Intent::Bubble,
        };
        let count = match rendered_intent {
            Intent::NoBubble => 0,
            Intent::Bubble => spec.bubble_count.unwrap_or_else(|| rng.random_range(MIN_BUBBLES..=MAX_BUBBLES)),
        };
        let color = palette_color(&spec.liquid_color).unwrap_or(fixtures::PALETTE[0].1);
        let rs = fixtures::spec_from_factors(
            Style::SynStyle,
            color,
            spec.level_pct as f64,
            count,
            rng.random(),
            self.width_px,
            self.height_px,
        );
        let rs = match rs {
            Ok(s) => s,
            Err(e) => return Some(encode_result_error(&line.key, 400, &e.to_string())),
        };
        let img = match fixtures::render(&rs) {
            Ok(r) => r.image,
            Err(e) => return Some(encode_result_error(&line.key, 500, &e.to_string())),
        };
        let img = if degrade {
            let blurred = raster::gaussian_blur(&raster::to_gray(&img), 8.0);
            DynamicImage::ImageLuma8(blurred)
        } else {
            DynamicImage::ImageRgb8(img)
        };
        match raster::encode_png(&img) {
            Ok(png) => Some(encode_result_image(&line.key, &png)),
            Err(e) => Some(encode_result_error(&line.key, 500, &e.to_string())),
        }
    }
}

impl Transport for MockTransport {
    fn run(&self, batch_jsonl: &str) -> Result<String, SynthError> {
        let lines: Vec<&str> = batch_jsonl.lines().filter(|l| !l.trim().is_empty()).collect();
        let out: Vec<String> = lines.par_iter().filter_map(|l| self.answer(l)).collect();
        let mut text = out.join("\n");
        text.push('\n');
        Ok(text)
    }
}
