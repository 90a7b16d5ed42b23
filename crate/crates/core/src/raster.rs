//! Raster helpers shared by the gate, scorer and curator.

use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, Luma, RgbImage};
use sha2::{Digest, Sha256};

/// Frame width every stored image is standardized to.
pub const TARGET_WIDTH: u32 = 600;
/// Frame height every stored image is standardized to.
pub const TARGET_HEIGHT: u32 = 1500;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("image could not be decoded: {0}")]
    Decode(String),
    #[error("image could not be encoded: {0}")]
    Encode(String),
}

/// Integer Rec. 601 luma. Exact for gray inputs (r = g = b).
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn to_gray(rgb: &RgbImage) -> GrayImage {
    let (w, h) = rgb.dimensions();
    let mut out = GrayImage::new(w, h);
    for (dst, src) in out.as_mut().iter_mut().zip(rgb.as_raw().chunks_exact(3)) {
        *dst = luma(src[0], src[1], src[2]);
    }
    out
}

/// Grayscale view of any decoded image, using [`luma`] for color inputs.
pub fn dynamic_to_gray(img: &DynamicImage) -> GrayImage {
    match img {
        DynamicImage::ImageLuma8(g) => g.clone(),
        other => to_gray(&other.to_rgb8()),
    }
}

pub fn gray_to_rgb(gray: &GrayImage) -> RgbImage {
    let (w, h) = gray.dimensions();
    let mut out = RgbImage::new(w, h);
    for (dst, &v) in out.as_mut().chunks_exact_mut(3).zip(gray.as_raw()) {
        dst.fill(v);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DynamicImage, RasterError> {
    image::load_from_memory(bytes).map_err(|e| RasterError::Decode(e.to_string()))
}

pub fn decode_png(bytes: &[u8]) -> Result<DynamicImage, RasterError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| RasterError::Decode(e.to_string()))
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, RasterError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| RasterError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` returns a copy.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (w, h) = img.dimensions();
    let (wi, hi) = (w as i64, h as i64);
    let src = img.as_raw();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..hi {
        let row = &src[(y * wi) as usize..((y + 1) * wi) as usize];
        for x in 0..wi {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x + k as i64 - radius).clamp(0, wi - 1);
                acc += kv * row[xx as usize] as f64;
            }
            tmp[(y * wi + x) as usize] = acc;
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y + k as i64 - radius).clamp(0, hi - 1);
                acc += kv * tmp[(yy * wi + x) as usize];
            }
            out.put_pixel(x as u32, y as u32, Luma([acc.round().clamp(0.0, 255.0) as u8]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_is_identity_on_gray() {
        for v in 0..=255u8 {
            assert_eq!(luma(v, v, v), v);
        }
    }

    #[test]
    fn png_round_trip() {
        let mut g = GrayImage::new(7, 5);
        g.put_pixel(3, 2, Luma([200]));
        let bytes = encode_png(&DynamicImage::ImageLuma8(g.clone())).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(dynamic_to_gray(&back), g);
    }

    #[test]
    fn garbage_does_not_decode() {
        assert!(decode(b"definitely not an image").is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let g = GrayImage::from_pixel(20, 20, Luma([77]));
        assert_eq!(gaussian_blur(&g, 2.0), g);
    }
}
