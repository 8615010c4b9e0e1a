//! Whole-image encode and decode.
//!
//! The image is padded by edge replication to whole tiles. Tiles are coded in
//! raster order: predict from the decoded neighbourhood, code the residual
//! against the quantized prediction, and store the decoded pixels so later
//! tiles see exactly what the decoder will see.

use log::debug;
use thiserror::Error;

use crate::bitstream::{read_stream, write_stream, Mode, Stream, StreamError, StreamHeader, TilePlan};
use crate::context::{build_context, normalize, predict_tile};
use crate::image_io::RgbImage;
use crate::metrics::psnr_samples;
use crate::model::{CodecModel, K_MAX, TILE};
use crate::nn::{BinaryCode, Deterministic};
use crate::residual::{quantize_output, ResidualDecoder, ResidualEncoder, ResidualError, ResidualTile};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image {width}x{height} exceeds the 65535x65535 stream limit")]
    TooLarge { width: usize, height: usize },
    #[error("constant mode k={0} outside 0..={K_MAX}")]
    InvalidK(usize),
    #[error("adaptive target {0} dB outside [0, 100)")]
    InvalidTarget(f64),
    #[error("stream was encoded with model {stream}, not {model}")]
    ModelMismatch { stream: String, model: String },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// How many residual iterations each tile receives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateMode {
    Constant(usize),
    /// Smallest iteration count whose tile quality reaches the target (dB).
    Adaptive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeConfig {
    pub mode: RateMode,
    /// Worker threads for wavefront parallelism; 0 uses all cores.
    pub threads: usize,
}

impl EncodeConfig {
    pub fn constant(k: usize) -> Self {
        EncodeConfig {
            mode: RateMode::Constant(k),
            threads: 1,
        }
    }

    pub fn adaptive(target: f64) -> Self {
        EncodeConfig {
            mode: RateMode::Adaptive(target),
            threads: 1,
        }
    }

    pub fn with_threads(self, threads: usize) -> Self {
        EncodeConfig { threads, ..self }
    }
}

/// Per-tile quality used by adaptive allocation; higher is better.
pub trait TileQuality: Sync {
    fn quality(&self, original: &[u8], reconstruction: &[u8]) -> f64;
}

/// Peak signal-to-noise ratio over the tile's RGB samples.
#[derive(Debug, Clone, Copy, Default)]
pub struct Psnr;

impl TileQuality for Psnr {
    fn quality(&self, original: &[u8], reconstruction: &[u8]) -> f64 {
        psnr_samples(original, reconstruction).expect("tiles have equal size")
    }
}

/// Result of encoding one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub plan: TilePlan,
    /// What the decoder will reproduce, cropped to the input size.
    pub reconstruction: RgbImage,
}

impl Encoded {
    pub fn bpp(&self) -> f64 {
        self.bytes.len() as f64 * 8.0 / self.pixels() as f64
    }

    pub fn payload_bpp(&self) -> f64 {
        self.plan.payload_bits() as f64 / self.pixels() as f64
    }

    fn pixels(&self) -> usize {
        self.reconstruction.width() * self.reconstruction.height()
    }
}

/// Copies tile `(row, col)` of a tile-aligned image.
pub fn tile_pixels(img: &RgbImage, row: usize, col: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(TILE * TILE * 3);
    for y in row * TILE..(row + 1) * TILE {
        let i = (y * img.width() + col * TILE) * 3;
        out.extend_from_slice(&img.pixels()[i..i + TILE * 3]);
    }
    out
}

fn store_tile(img: &mut RgbImage, row: usize, col: usize, px: &[u8]) {
    let w = img.width();
    let dst = img.pixels_mut();
    for (dy, src) in px.chunks_exact(TILE * 3).enumerate() {
        let i = ((row * TILE + dy) * w + col * TILE) * 3;
        dst[i..i + TILE * 3].copy_from_slice(src);
    }
}

/// Quantized prediction for tile `(row, col)` of the decoded buffer.
pub fn predicted_tile(decoded: &RgbImage, row: usize, col: usize, model: &CodecModel) -> Result<Vec<u8>, CodecError> {
    let ctx = build_context(decoded, row, col).expect("tile inside padded buffer");
    Ok(predict_tile(&ctx, model)?.pixels.iter().map(|&v| quantize_output(v)).collect())
}

fn reconstruct(pred_n: &[f32], j: &[f32]) -> Vec<u8> {
    pred_n.iter().zip(j).map(|(&p, &r)| quantize_output(p + r)).collect()
}

/// Coded tile: iteration count, codes and decoded pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedTile {
    pub k: usize,
    pub codes: Vec<BinaryCode>,
    pub pixels: Vec<u8>,
}

/// Codes one tile given its original pixels and the quantized prediction.
/// Adaptive mode stops at the first iteration count, starting from zero,
/// whose quality reaches `target`; tiles that never reach it use `K_MAX`.
pub fn code_tile(
    original: &[u8],
    prediction: &[u8],
    model: &CodecModel,
    mode: RateMode,
    quality: &dyn TileQuality,
) -> Result<CodedTile, CodecError> {
    let pred_n: Vec<f32> = prediction.iter().map(|&p| normalize(p)).collect();
    let (limit, target) = match mode {
        RateMode::Constant(k) => (k, None),
        RateMode::Adaptive(t) => (K_MAX, Some(t)),
    };
    let mut tile = CodedTile {
        k: 0,
        codes: Vec::new(),
        pixels: prediction.to_vec(),
    };
    if target.is_some_and(|t| quality.quality(original, &tile.pixels) >= t) || limit == 0 {
        return Ok(tile);
    }
    let r0 = ResidualTile::new(original.iter().zip(&pred_n).map(|(&o, &p)| normalize(o) - p).collect())
        .expect("finite residual");
    let mut enc = ResidualEncoder::new(model, &r0);
    let mut sampler = Deterministic;
    for k in 1..=limit {
        let out = enc.step(&mut sampler)?;
        tile.codes.push(out.code);
        tile.pixels = reconstruct(&pred_n, &out.reconstruction);
        tile.k = k;
        if target.is_some_and(|t| quality.quality(original, &tile.pixels) >= t) {
            break;
        }
    }
    Ok(tile)
}

/// Minimal iteration count in `0..=K_MAX` reaching `target` PSNR for one
/// tile, or `K_MAX` if none does.
pub fn allocate_adaptive(original: &[u8], prediction: &[u8], target: f64, model: &CodecModel) -> Result<usize, CodecError> {
    Ok(code_tile(original, prediction, model, RateMode::Adaptive(target), &Psnr)?.k)
}

/// Tiles grouped into wavefronts. Tile `(r, c)` is in wave `2r + c`, so the
/// tiles to its left, above-left, above and above-right are all in earlier
/// waves.
pub fn wavefronts(rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    let mut waves = vec![Vec::new(); if rows == 0 || cols == 0 { 0 } else { 2 * (rows - 1) + cols }];
    for r in 0..rows {
        for c in 0..cols {
            waves[2 * r + c].push((r, c));
        }
    }
    waves
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, CodecError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CodecError::Pool(e.to_string()))
}

/// Runs `f` on every tile in wavefront order, storing each returned tile
/// into `buffer` before the next wave starts. Results are returned in raster
/// order; they do not depend on the thread count.
fn run_wavefronts<T: Send>(
    buffer: &mut RgbImage,
    threads: usize,
    f: impl Fn(&RgbImage, usize, usize) -> Result<(T, Vec<u8>), CodecError> + Sync,
) -> Result<Vec<T>, CodecError> {
    use rayon::prelude::*;
    let (rows, cols) = (buffer.height() / TILE, buffer.width() / TILE);
    let mut results: Vec<Option<T>> = (0..rows * cols).map(|_| None).collect();
    let pool = (threads != 1).then(|| pool(threads)).transpose()?;
    for wave in wavefronts(rows, cols) {
        let done: Vec<Result<(T, Vec<u8>), CodecError>> = match &pool {
            Some(p) if wave.len() > 1 => {
                let snapshot = &*buffer;
                p.install(|| wave.par_iter().map(|&(r, c)| f(snapshot, r, c)).collect())
            }
            _ => wave.iter().map(|&(r, c)| f(buffer, r, c)).collect(),
        };
        for (&(r, c), res) in wave.iter().zip(done) {
            let (t, px) = res?;
            store_tile(buffer, r, c, &px);
            results[r * cols + c] = Some(t);
        }
    }
    Ok(results.into_iter().map(|t| t.expect("every tile visited")).collect())
}

fn padded_size(w: usize, h: usize) -> (usize, usize) {
    (w.div_ceil(TILE) * TILE, h.div_ceil(TILE) * TILE)
}

pub fn encode_image(img: &RgbImage, cfg: &EncodeConfig, model: &CodecModel) -> Result<Encoded, CodecError> {
    encode_image_with(img, cfg, model, &Psnr)
}

/// [`encode_image`] with a custom per-tile quality measure for adaptive mode.
pub fn encode_image_with(
    img: &RgbImage,
    cfg: &EncodeConfig,
    model: &CodecModel,
    quality: &dyn TileQuality,
) -> Result<Encoded, CodecError> {
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(CodecError::TooLarge { width: w, height: h });
    }
    let (mode, rate) = match cfg.mode {
        RateMode::Constant(k) if k <= K_MAX => (Mode::Constant(k as u8), cfg.mode),
        RateMode::Constant(k) => return Err(CodecError::InvalidK(k)),
        RateMode::Adaptive(t) => {
            let mode = Mode::adaptive_db(t).ok_or(CodecError::InvalidTarget(t))?;
            // The decoder-visible target is the fixed-point header value.
            (mode, RateMode::Adaptive(mode.target_db().expect("adaptive")))
        }
    };
    let (pw, ph) = padded_size(w, h);
    let original = img.pad_replicate(pw, ph);
    let mut decoded = RgbImage::filled(pw, ph, [128; 3]).expect("positive size");
    let tiles = run_wavefronts(&mut decoded, cfg.threads, |buf, r, c| {
        let pred = predicted_tile(buf, r, c, model)?;
        let tile = code_tile(&tile_pixels(&original, r, c), &pred, model, rate, quality)?;
        let px = tile.pixels.clone();
        Ok((tile, px))
    })?;
    let (rows, cols) = (ph / TILE, pw / TILE);
    let plan = TilePlan {
        rows,
        cols,
        iterations: tiles.iter().map(|t| t.k as u8).collect(),
    };
    let codes: Vec<Vec<BinaryCode>> = tiles.into_iter().map(|t| t.codes).collect();
    let header = StreamHeader {
        width: w as u16,
        height: h as u16,
        mode,
        model_digest: model.digest(),
    };
    let bytes = write_stream(&header, &plan, &codes)?;
    debug!("encoded {w}x{h} into {} bytes, plan {:?}", bytes.len(), plan.histogram());
    Ok(Encoded {
        bytes,
        plan,
        reconstruction: decoded.crop(0, 0, w, h),
    })
}

/// Decodes a parsed stream.
pub fn decode_stream(stream: &Stream, model: &CodecModel, threads: usize) -> Result<RgbImage, CodecError> {
    let digest = model.digest();
    if stream.header.model_digest != digest {
        return Err(CodecError::ModelMismatch {
            stream: crate::bitstream::hex(&stream.header.model_digest),
            model: crate::bitstream::hex(&digest),
        });
    }
    let (w, h) = (stream.header.width as usize, stream.header.height as usize);
    let (pw, ph) = padded_size(w, h);
    let cols = pw / TILE;
    let mut decoded = RgbImage::filled(pw, ph, [128; 3]).expect("positive size");
    run_wavefronts(&mut decoded, threads, |buf, r, c| {
        let pred = predicted_tile(buf, r, c, model)?;
        let codes = &stream.codes[r * cols + c];
        if codes.is_empty() {
            return Ok(((), pred));
        }
        let pred_n: Vec<f32> = pred.iter().map(|&p| normalize(p)).collect();
        let mut dec = ResidualDecoder::new(model);
        let mut j = Vec::new();
        for code in codes {
            j = dec.step(code)?.1;
        }
        Ok(((), reconstruct(&pred_n, &j)))
    })?;
    Ok(decoded.crop(0, 0, w, h))
}

pub fn decode_image(bytes: &[u8], model: &CodecModel) -> Result<RgbImage, CodecError> {
    decode_image_threads(bytes, model, 1)
}

pub fn decode_image_threads(bytes: &[u8], model: &CodecModel, threads: usize) -> Result<RgbImage, CodecError> {
    decode_stream(&read_stream(bytes)?, model, threads)
}
