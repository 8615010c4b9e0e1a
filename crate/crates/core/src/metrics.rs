//! Distortion measures.

use thiserror::Error;

use crate::image_io::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("cannot compare {a_len} samples with {b_len}")]
pub struct SizeMismatch {
    pub a_len: usize,
    pub b_len: usize,
}

/// Sum of squared differences, exact in integers.
pub fn sse(a: &[u8], b: &[u8]) -> Result<u64, SizeMismatch> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SizeMismatch {
            a_len: a.len(),
            b_len: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum())
}

/// `10·log10(255² / MSE)` over all samples; `+∞` for identical inputs.
pub fn psnr_samples(a: &[u8], b: &[u8]) -> Result<f64, SizeMismatch> {
    let s = sse(a, b)?;
    if s == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = s as f64 / a.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, SizeMismatch> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(SizeMismatch {
            a_len: a.pixels().len(),
            b_len: b.pixels().len(),
        });
    }
    psnr_samples(a.pixels(), b.pixels())
}

/// Mean absolute difference between pixels on either side of every
/// internal tile boundary, averaged over boundary pixel pairs and channels.
pub fn boundary_discontinuity(img: &RgbImage, tile: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let (mut sum, mut n) = (0u64, 0u64);
    let mut pair = |a: [u8; 3], b: [u8; 3]| {
        for c in 0..3 {
            sum += (a[c] as i32 - b[c] as i32).unsigned_abs() as u64;
            n += 1;
        }
    };
    for x in (tile..w).step_by(tile) {
        for y in 0..h {
            pair(img.pixel(x - 1, y), img.pixel(x, y));
        }
    }
    for y in (tile..h).step_by(tile) {
        for x in 0..w {
            pair(img.pixel(x, y - 1), img.pixel(x, y));
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}
