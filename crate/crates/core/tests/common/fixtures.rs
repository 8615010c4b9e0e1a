//! Shipped data, small models and direct oracles shared by the test targets.

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tilecodec::bitstream::load_model;
use tilecodec::context::normalize;
use tilecodec::eval::{load_corpus, CorpusImage};
use tilecodec::image_io::RgbImage;
use tilecodec::metrics::psnr_samples;
use tilecodec::model::{Architecture, CodecModel, K_MAX};
use tilecodec::nn::{Deterministic, InitScheme};
use tilecodec::residual::{ResidualEncoder, ResidualTile};

pub fn testdata(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(rel)
}

/// The committed model trained with the toy recipe.
pub fn toy_model() -> CodecModel {
    let bytes = std::fs::read(testdata("toy.tncm")).expect("toy model fixture");
    load_model(&bytes).expect("valid toy model")
}

pub fn train_split() -> Vec<CorpusImage> {
    load_corpus(&testdata("corpus/train")).expect("training split")
}

pub fn heldout_split() -> Vec<CorpusImage> {
    load_corpus(&testdata("corpus/heldout")).expect("held-out split")
}

/// Untrained toy-sized model with weights large enough to give varied
/// codes and predictions.
pub fn random_model(seed: u64) -> CodecModel {
    CodecModel::init_with(Architecture::toy(), InitScheme::FanIn(1.0), seed)
}

/// Image mixing a smooth gradient, blocks and noise, so neither the
/// predictor nor the residual coder sees a trivial input.
pub fn fuzz_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    let base: [f32; 3] = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
    let slope: [f32; 2] = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let noise = rng.random_range(0.0..60.0);
    let block = rng.random_range(4..40usize);
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let checker = if (x / block + y / block) % 2 == 0 { 30.0 } else { -30.0 };
            for b in base {
                let v = b + slope[0] * x as f32 + slope[1] * y as f32 + checker + rng.random_range(-noise..=noise);
                px.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(w, h, px).unwrap()
}

/// `round(min(max(v·142 + 128, 0), 255))` evaluated without shortcuts.
pub fn quantize_oracle(v: f32) -> u8 {
    let s = v as f64 * 142.0 + 128.0;
    let clamped = if s < 0.0 {
        0.0
    } else if s > 255.0 {
        255.0
    } else {
        s
    };
    let floor = clamped.floor();
    let rounded = if clamped - floor >= 0.5 { floor + 1.0 } else { floor };
    rounded as u8
}

/// Tile quality after each iteration count `0..=K_MAX`, from one
/// uninterrupted run of the residual encoder.
pub fn psnr_by_iterations(original: &[u8], prediction: &[u8], model: &CodecModel) -> Vec<f64> {
    let pred_n: Vec<f32> = prediction.iter().map(|&p| normalize(p)).collect();
    let r0 = ResidualTile::new(original.iter().zip(&pred_n).map(|(&o, &p)| normalize(o) - p).collect()).unwrap();
    let mut enc = ResidualEncoder::new(model, &r0);
    let mut out = vec![psnr_samples(original, prediction).unwrap()];
    for _ in 0..K_MAX {
        let step = enc.step(&mut Deterministic).unwrap();
        let px: Vec<u8> = pred_n.iter().zip(&step.reconstruction).map(|(&p, &j)| quantize_oracle(p + j)).collect();
        out.push(psnr_samples(original, &px).unwrap());
    }
    out
}

/// Smallest k whose quality reaches `target`, else `K_MAX`.
pub fn brute_force_k(curve: &[f64], target: f64) -> usize {
    curve.iter().position(|&q| q >= target).unwrap_or(K_MAX)
}
