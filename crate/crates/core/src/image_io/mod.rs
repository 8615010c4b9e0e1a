//! Lossless image files: binary PPM and PNG, both self-contained.

pub mod deflate;
pub mod png;
pub mod ppm;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use deflate::Strategy;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("corrupt image data: {0}")]
    Corrupt(String),
    #[error("image must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage { width, height });
        }
        if pixels.len() != width * height * 3 {
            return Err(ImageError::Corrupt(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w × h` region at `(x, y)`; panics if it leaves the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
        assert!(x + w <= self.width && y + h <= self.height && w > 0 && h > 0, "crop outside image");
        let mut px = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let i = (row * self.width + x) * 3;
            px.extend_from_slice(&self.pixels[i..i + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            pixels: px,
        }
    }

    /// Extends to `w × h` by replicating the last column and row.
    pub fn pad_replicate(&self, w: usize, h: usize) -> RgbImage {
        assert!(w >= self.width && h >= self.height);
        let mut px = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let sy = y.min(self.height - 1);
            let row = &self.pixels[sy * self.width * 3..(sy + 1) * self.width * 3];
            px.extend_from_slice(row);
            let last = &row[row.len() - 3..];
            for _ in self.width..w {
                px.extend_from_slice(last);
            }
        }
        RgbImage {
            width: w,
            height: h,
            pixels: px,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Guesses from the file extension; anything but `.png` is PPM.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

/// Decodes PPM or PNG, detected from the leading bytes.
pub fn decode_image(data: &[u8]) -> Result<RgbImage, ImageError> {
    if data.starts_with(&png::SIGNATURE) {
        png::decode(data)
    } else if data.first() == Some(&b'P') {
        ppm::decode(data)
    } else {
        Err(ImageError::Unsupported("not a PPM or PNG file".into()))
    }
}

pub fn encode_image(img: &RgbImage, format: ImageFormat) -> Vec<u8> {
    match format {
        ImageFormat::Ppm => ppm::encode(img),
        ImageFormat::Png => png::encode(img, Strategy::FixedHuffman),
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage, ImageError> {
    let data = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&data)
}

pub fn write_image(img: &RgbImage, path: &Path, format: ImageFormat) -> Result<(), ImageError> {
    std::fs::write(path, encode_image(img, format)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}
