//! Binary PPM (P6) with maxval 255.

use super::{ImageError, RgbImage};

fn corrupt(msg: impl Into<String>) -> ImageError {
    ImageError::Corrupt(msg.into())
}

/// Reads one header token, skipping whitespace and `#` comments.
fn token(data: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    loop {
        match data.get(*pos) {
            Some(b'#') => {
                while data.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(corrupt("PPM header truncated")),
        }
    }
    let start = *pos;
    while data.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("malformed PPM header field"))
}

pub fn decode(data: &[u8]) -> Result<RgbImage, ImageError> {
    match data.get(..2) {
        Some(b"P6") => {}
        Some([b'P', d]) if d.is_ascii_digit() => {
            return Err(ImageError::Unsupported(format!("netpbm variant P{}", *d as char)))
        }
        _ => return Err(corrupt("missing PPM magic")),
    }
    let mut pos = 2;
    let width = token(data, &mut pos)?;
    let height = token(data, &mut pos)?;
    let maxval = token(data, &mut pos)?;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("PPM maxval {maxval}")));
    }
    if !data.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("PPM header not terminated"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyImage { width, height });
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| corrupt("PPM dimensions overflow"))?;
    let body = &data[pos..];
    if body.len() < need {
        return Err(corrupt(format!("PPM pixel data is {} bytes, expected {need}", body.len())));
    }
    RgbImage::new(width, height, body[..need].to_vec())
}

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}
