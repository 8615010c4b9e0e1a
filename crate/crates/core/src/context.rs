//! Spatial context predictor: infers a tile from the decoded tiles above and
//! to the left of it.

use thiserror::Error;

use crate::image_io::RgbImage;
use crate::model::{CodecModel, ContextArch, CONTEXT, TILE};
use crate::nn::{Binder, ChannelwiseFc, Conv, Registry, UpConv};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Slope of the leaky rectifier on the feature-extraction path.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Maps an 8-bit sample to network range; the exact inverse of the output
/// quantizer's `v·142 + 128`.
#[inline]
pub fn normalize(p: u8) -> f32 {
    (p as f32 - 128.0) / 142.0
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("tile ({row}, {col}) outside a {rows}x{cols} tile grid")]
pub struct TileIndexError {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// A 64×64×3 window in network range whose bottom-right 32×32 quadrant is
/// always the neutral value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPatch {
    pixels: Vec<f32>,
}

impl ContextPatch {
    /// Wraps normalized HWC values, neutralizing the target quadrant.
    pub fn from_normalized(mut pixels: Vec<f32>) -> Option<Self> {
        if pixels.len() != CONTEXT * CONTEXT * 3 {
            return None;
        }
        for y in TILE..CONTEXT {
            let row = (y * CONTEXT + TILE) * 3;
            pixels[row..row + TILE * 3].fill(0.0);
        }
        Some(ContextPatch { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, CONTEXT, CONTEXT, 3], self.pixels.clone()).expect("fixed size")
    }
}

/// Predicted 32×32×3 tile in network range.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePrediction {
    pub pixels: Vec<f32>,
}

/// Gathers the context window for tile `(row, col)` of `decoded`. Pixels
/// outside the image, and the target quadrant itself, are neutral.
pub fn build_context(decoded: &RgbImage, row: usize, col: usize) -> Result<ContextPatch, TileIndexError> {
    let rows = decoded.height().div_ceil(TILE);
    let cols = decoded.width().div_ceil(TILE);
    if row >= rows || col >= cols {
        return Err(TileIndexError { row, col, rows, cols });
    }
    let mut pixels = vec![0.0f32; CONTEXT * CONTEXT * 3];
    let y0 = (row * TILE) as isize - TILE as isize;
    let x0 = (col * TILE) as isize - TILE as isize;
    for wy in 0..CONTEXT {
        let y = y0 + wy as isize;
        if y < 0 || y >= decoded.height() as isize {
            continue;
        }
        for wx in 0..CONTEXT {
            if wy >= TILE && wx >= TILE {
                break;
            }
            let x = x0 + wx as isize;
            if x < 0 || x >= decoded.width() as isize {
                continue;
            }
            let src = decoded.pixel(x as usize, y as usize);
            let dst = (wy * CONTEXT + wx) * 3;
            for c in 0..3 {
                pixels[dst + c] = normalize(src[c]);
            }
        }
    }
    Ok(ContextPatch { pixels })
}

/// Parameter handles of the context predictor.
#[derive(Debug, Clone)]
pub struct ContextNet {
    pub down: Vec<Conv>,
    pub channelwise: ChannelwiseFc,
    pub up: Vec<UpConv>,
    pub head: Conv,
}

impl ContextNet {
    pub fn register(reg: &mut Registry, arch: &ContextArch) -> Self {
        let mut in_c = 3;
        let mut down = Vec::new();
        for (i, &d) in arch.down.iter().enumerate() {
            down.push(Conv::register(reg, &format!("ctx.down{i}"), 3, in_c, d, 2, true));
            in_c = d;
        }
        let channelwise = ChannelwiseFc::register(reg, "ctx.cfc", CONTEXT / 16, in_c);
        let mut up = Vec::new();
        for (i, &d) in arch.up.iter().enumerate() {
            up.push(UpConv::register(reg, &format!("ctx.up{i}"), 4, in_c, d));
            in_c = d;
        }
        let head = Conv::register(reg, "ctx.head", 1, in_c, 3, 1, true);
        ContextNet {
            down,
            channelwise,
            up,
            head,
        }
    }

    /// `x` is `batch × 64 × 64 × 3`; returns `batch × 32 × 32 × 3` in (−1, 1).
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for layer in &self.down {
            h = layer.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        h = self.channelwise.forward(g, p, h)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for layer in &self.up {
            h = layer.forward(g, p, h)?;
            h = g.relu(h);
        }
        h = self.head.forward(g, p, h)?;
        Ok(g.tanh(h))
    }
}

/// Runs the context predictor on one window.
pub fn predict_tile(ctx: &ContextPatch, model: &CodecModel) -> Result<TilePrediction, TensorError> {
    let mut g = Graph::inference();
    let mut p = Binder::frozen(model.params());
    let x = g.constant(ctx.to_tensor());
    let y = model.context_net().forward(&mut g, &mut p, x)?;
    Ok(TilePrediction {
        pixels: g.value(y).data().to_vec(),
    })
}
