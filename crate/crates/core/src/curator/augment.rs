//! Light, gravity-preserving augmentation.

use image::{ImageBuffer, Pixel};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize};

use super::CuratorError;
use crate::raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg_max: f64,
    /// Maximum shift as a fraction of the frame size, per axis.
    pub translate_frac_max: f64,
    /// Additive brightness offset range, as a fraction of full scale.
    pub brightness_max: f64,
    /// Contrast gain drawn from `[1 - c, 1 + c]` around mid-gray.
    pub contrast_max: f64,
    /// Gamma drawn from `[1 - g, 1 + g]`.
    pub gamma_max: f64,
    pub gaussian_noise_sigma: f64,
    pub blur_sigma: f64,
    /// Always false; flipping would invert the meniscus.
    #[serde(deserialize_with = "no_vertical_flip")]
    pub vertical_flip: bool,
}

fn no_vertical_flip<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match bool::deserialize(d)? {
        false => Ok(false),
        true => Err(serde::de::Error::custom("vertical_flip cannot be enabled")),
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg_max: 2.0,
            translate_frac_max: 0.03,
            brightness_max: 0.08,
            contrast_max: 0.1,
            gamma_max: 0.1,
            gaussian_noise_sigma: 2.0,
            blur_sigma: 0.8,
            vertical_flip: false,
        }
    }
}

impl AugmentConfig {
    /// All ranges zero: the identity.
    pub fn none() -> Self {
        Self {
            rotation_deg_max: 0.0,
            translate_frac_max: 0.0,
            brightness_max: 0.0,
            contrast_max: 0.0,
            gamma_max: 0.0,
            gaussian_noise_sigma: 0.0,
            blur_sigma: 0.0,
            vertical_flip: false,
        }
    }

    pub fn validate(&self) -> Result<(), CuratorError> {
        if self.vertical_flip {
            return Err(CuratorError::InvalidConfig("vertical_flip cannot be enabled".into()));
        }
        let ranges = [
            ("rotation_deg_max", self.rotation_deg_max, 45.0),
            ("translate_frac_max", self.translate_frac_max, 0.5),
            ("brightness_max", self.brightness_max, 1.0),
            ("contrast_max", self.contrast_max, 1.0),
            ("gamma_max", self.gamma_max, 0.9),
            ("gaussian_noise_sigma", self.gaussian_noise_sigma, 128.0),
            ("blur_sigma", self.blur_sigma, 32.0),
        ];
        for (name, v, max) in ranges {
            if !(0.0..=max).contains(&v) {
                return Err(CuratorError::InvalidConfig(format!("{name} = {v} outside [0, {max}]")));
            }
        }
        Ok(())
    }
}

/// One draw of every transform parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shift_x_px: f64,
    pub shift_y_px: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

fn upto(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(0.0..=max)
    }
}

pub fn sample_params(config: &AugmentConfig, width: u32, height: u32, rng: &mut impl Rng) -> AugmentParams {
    AugmentParams {
        rotation_deg: symmetric(rng, config.rotation_deg_max),
        shift_x_px: symmetric(rng, config.translate_frac_max * width as f64),
        shift_y_px: symmetric(rng, config.translate_frac_max * height as f64),
        brightness: symmetric(rng, config.brightness_max) * 255.0,
        contrast: 1.0 + symmetric(rng, config.contrast_max),
        gamma: 1.0 + symmetric(rng, config.gamma_max),
        noise_sigma: upto(rng, config.gaussian_noise_sigma),
        blur_sigma: upto(rng, config.blur_sigma),
    }
}

type Img<P> = ImageBuffer<P, Vec<u8>>;

/// Rotation about the frame center followed by a shift, bilinear sampling,
/// black outside the source.
fn warp<P: Pixel<Subpixel = u8>>(img: &Img<P>, deg: f64, dx: f64, dy: f64) -> Img<P> {
    let (w, h) = img.dimensions();
    let ch = P::CHANNEL_COUNT as usize;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let src = img.as_raw();
    let mut out = vec![0u8; src.len()];
    for y in 0..h as usize {
        for x in 0..w as usize {
            // inverse map: undo the shift, then rotate back
            let (ux, uy) = (x as f64 + 0.5 - dx - cx, y as f64 + 0.5 - dy - cy);
            let sx = c * ux + s * uy + cx - 0.5;
            let sy = -s * ux + c * uy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let o = (y * w as usize + x) * ch;
            for k in 0..ch {
                let mut acc = 0.0;
                for (xi, yi, wgt) in [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ] {
                    if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 && wgt > 0.0 {
                        acc += wgt * src[(yi as usize * w as usize + xi as usize) * ch + k] as f64;
                    }
                }
                out[o + k] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::from_raw(w, h, out).expect("same size")
}

fn blur<P: Pixel<Subpixel = u8>>(img: &Img<P>, sigma: f64) -> Img<P> {
    let (w, h) = img.dimensions();
    let ch = P::CHANNEL_COUNT as usize;
    let mut out = img.as_raw().clone();
    for k in 0..ch {
        let plane = image::GrayImage::from_fn(w, h, |x, y| image::Luma([img.get_pixel(x, y).channels()[k]]));
        let b = raster::gaussian_blur(&plane, sigma);
        for (i, v) in b.as_raw().iter().enumerate() {
            out[i * ch + k] = *v;
        }
    }
    ImageBuffer::from_raw(w, h, out).expect("same size")
}

/// Applies drawn parameters. Noise samples come from `rng`.
pub fn apply<P: Pixel<Subpixel = u8>>(img: &Img<P>, p: &AugmentParams, rng: &mut impl Rng) -> Img<P> {
    let mut cur = if p.rotation_deg != 0.0 || p.shift_x_px != 0.0 || p.shift_y_px != 0.0 {
        warp(img, p.rotation_deg, p.shift_x_px, p.shift_y_px)
    } else {
        img.clone()
    };
    if p.brightness != 0.0 || p.contrast != 1.0 || p.gamma != 1.0 {
        let lut: Vec<u8> = (0..=255u32)
            .map(|v| {
                let g = 255.0 * (v as f64 / 255.0).powf(p.gamma);
                let c = (g - 128.0) * p.contrast + 128.0 + p.brightness;
                c.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        cur.iter_mut().for_each(|v| *v = lut[*v as usize]);
    }
    if p.blur_sigma > 0.0 {
        cur = blur(&cur, p.blur_sigma);
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("finite sigma");
        let ch = P::CHANNEL_COUNT as usize;
        for px in cur.chunks_exact_mut(ch) {
            let n: f64 = normal.sample(rng);
            px.iter_mut().for_each(|v| *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    cur
}

/// Draws parameters and applies them. Output size matches the input and
/// the frame is never flipped vertically.
pub fn augment<P: Pixel<Subpixel = u8>>(
    img: &Img<P>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Img<P>, AugmentParams), CuratorError> {
    config.validate()?;
    let p = sample_params(config, img.width(), img.height(), rng);
    Ok((apply(img, &p, rng), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, RgbImage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> RgbImage {
        RgbImage::from_fn(60, 150, |x, y| image::Rgb([(x * 4) as u8, (y % 256) as u8, ((x + y) % 200) as u8]))
    }

    #[test]
    fn zero_ranges_are_identity() {
        let img = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, p) = augment(&img, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(p.rotation_deg, 0.0);
    }

    #[test]
    fn rotation_stays_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let max = (0..10_000).map(|_| sample_params(&cfg, 600, 1500, &mut rng).rotation_deg.abs()).fold(0.0, f64::max);
        assert!(max <= 2.0 && max > 1.9);
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let img = scene();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.dimensions(), img.dimensions());
    }

    #[test]
    fn shift_fills_with_black() {
        let img = GrayImage::from_pixel(20, 20, Luma([100]));
        let p = AugmentParams { shift_x_px: 5.0, ..sample_params(&AugmentConfig::none(), 20, 20, &mut ChaCha8Rng::seed_from_u64(0)) };
        let out = apply(&img, &p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.get_pixel(2, 10)[0], 0);
        assert_eq!(out.get_pixel(10, 10)[0], 100);
    }

    #[test]
    fn vertical_flip_cannot_be_enabled() {
        assert!(serde_json::from_str::<AugmentConfig>(r#"{"vertical_flip": true}"#).is_err());
        assert!(serde_json::from_str::<AugmentConfig>(r#"{"vertical_flip": false}"#).is_ok());
        let cfg = AugmentConfig { vertical_flip: true, ..AugmentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
