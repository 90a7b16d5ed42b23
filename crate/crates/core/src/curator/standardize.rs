//! Resizing every frame to exactly 600x1500 while keeping the tip's bottom.

use image::{ImageBuffer, Pixel};
use serde::{Deserialize, Serialize};

use super::CuratorError;
use crate::raster::{TARGET_HEIGHT, TARGET_WIDTH};

pub const MIN_SIDE_PX: u32 = 8;

/// How frames smaller than the target are brought up to size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    /// Scale by `max(600/w, 1500/h)` (nearest neighbour), then crop.
    #[default]
    Upscale,
    /// Pad with black: columns split evenly (extra on the right), rows on top.
    Letterbox,
}

type Img<P> = ImageBuffer<P, Vec<<P as Pixel>::Subpixel>>;

/// Output size of the proportional upscale, or the input size when both
/// sides already reach the target.
pub fn upscaled_size(w: u32, h: u32) -> (u32, u32) {
    if w >= TARGET_WIDTH && h >= TARGET_HEIGHT {
        return (w, h);
    }
    // compare 600/w and 1500/h without floating point
    let (num, den) = if TARGET_WIDTH as u64 * h as u64 >= TARGET_HEIGHT as u64 * w as u64 {
        (TARGET_WIDTH as u64, w as u64)
    } else {
        (TARGET_HEIGHT as u64, h as u64)
    };
    let scale = |v: u32| (v as u64 * num).div_ceil(den) as u32;
    (scale(w).max(TARGET_WIDTH), scale(h).max(TARGET_HEIGHT))
}

/// Nearest-neighbour resize: output pixel `x` samples source column
/// `floor((x + 0.5) * w / new_w)`.
pub fn resize_nearest<P: Pixel>(img: &Img<P>, new_w: u32, new_h: u32) -> Img<P> {
    let (w, h) = img.dimensions();
    let xs: Vec<u32> = (0..new_w).map(|x| ((2 * x as u64 + 1) * w as u64 / (2 * new_w as u64)) as u32).collect();
    let ys: Vec<u32> = (0..new_h).map(|y| ((2 * y as u64 + 1) * h as u64 / (2 * new_h as u64)) as u32).collect();
    ImageBuffer::from_fn(new_w, new_h, |x, y| *img.get_pixel(xs[x as usize], ys[y as usize]))
}

/// Exactly 600x1500: upscale (or letterbox) if a side is short, then
/// center-crop the width (odd remainder taken from the right) and crop the
/// height from the top.
pub fn standardize<P: Pixel>(img: &Img<P>, mode: StandardizeMode) -> Result<Img<P>, CuratorError> {
    let (w, h) = img.dimensions();
    if w < MIN_SIDE_PX || h < MIN_SIDE_PX {
        return Err(CuratorError::Degenerate { width: w, height: h });
    }
    let grown: Img<P> = match mode {
        StandardizeMode::Upscale => {
            let (nw, nh) = upscaled_size(w, h);
            if (nw, nh) == (w, h) {
                img.clone()
            } else {
                resize_nearest(img, nw, nh)
            }
        }
        StandardizeMode::Letterbox => {
            let (nw, nh) = (w.max(TARGET_WIDTH), h.max(TARGET_HEIGHT));
            let left = (nw - w) / 2;
            let top = nh - h;
            let mut out: Img<P> = ImageBuffer::new(nw, nh);
            for (x, y, p) in img.enumerate_pixels() {
                out.put_pixel(x + left, y + top, *p);
            }
            out
        }
    };
    let (gw, gh) = grown.dimensions();
    let left = (gw - TARGET_WIDTH) / 2;
    let top = gh - TARGET_HEIGHT;
    Ok(ImageBuffer::from_fn(TARGET_WIDTH, TARGET_HEIGHT, |x, y| *grown.get_pixel(x + left, y + top)))
}
