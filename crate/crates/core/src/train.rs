//! Two-phase training: the context predictor first, then the residual coder
//! on the residuals left by the frozen predictor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::context::{normalize, ContextPatch};
use crate::image_io::deflate::compressed_bits;
use crate::image_io::RgbImage;
use crate::model::{CodecModel, CONTEXT, INIT_SIGMA, TILE};
use crate::nn::{Binder, InitScheme, ParamId, Params, Stochastic};
use crate::residual::quantize_output;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Iterations unrolled per residual training example.
pub const TRAIN_UNROLL: usize = 8;
/// Hardest crops kept from each corpus image.
pub const PATCHES_PER_IMAGE: usize = 100;
/// Step counts and seed of the desk-scale recipe behind the shipped toy model.
pub const TOY_CONTEXT_STEPS: u64 = 2_000;
pub const TOY_RESIDUAL_STEPS: u64 = 1_000;
pub const TOY_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("residual training needs a trained context model")]
    MissingContextModel,
    #[error("image {width}x{height} is smaller than one {CONTEXT}x{CONTEXT} patch")]
    ImageTooSmall { width: usize, height: usize },
    #[error("loss became non-finite at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Context,
    Residual,
}

/// What the learning rate multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrConvention {
    /// `lr · m̂ / (√v̂ + ε)`, the usual Adam step.
    #[default]
    AdamStep,
    /// `lr · m̂`: bias-corrected momentum without the second-moment
    /// normalization.
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_step: u64,
    pub steps: u64,
    pub seed: u64,
    pub lr_convention: LrConvention,
    /// Initializer for a model created from scratch by this recipe.
    pub init: InitScheme,
    /// Residual phase only: zero the context weights so every prediction is
    /// mid-gray and tiles are coded independently.
    pub ablate_context: bool,
}

impl TrainConfig {
    /// Batch 32, learning rate 0.5 decaying by 0.95 every 20,000 steps.
    pub fn as_published(phase: Phase, steps: u64, seed: u64) -> Self {
        TrainConfig {
            phase,
            batch_size: 32,
            lr0: 0.5,
            decay: 0.95,
            decay_step: 20_000,
            steps,
            seed,
            lr_convention: LrConvention::AdamStep,
            init: InitScheme::Fixed(INIT_SIGMA),
            ablate_context: false,
        }
    }

    /// Desk-scale recipe: same schedule shape with a stable learning rate,
    /// smaller batches and fan-in scaled initial weights.
    pub fn toy(phase: Phase, steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: match phase {
                Phase::Context => 16,
                Phase::Residual => 8,
            },
            lr0: 1e-3,
            init: InitScheme::FanIn(1.0),
            ..Self::as_published(phase, steps, seed)
        }
    }

    /// `lr0 · decay^⌊step / decay_step⌋`.
    pub fn lr(&self, step: u64) -> f64 {
        lr_schedule(self.lr0, self.decay, self.decay_step, step)
    }
}

/// Staircase exponential decay.
pub fn lr_schedule(lr0: f64, decay: f64, decay_step: u64, step: u64) -> f64 {
    let n = step / decay_step;
    lr0 * decay.powi(n.min(i32::MAX as u64) as i32)
}

/// A 64×64 training crop and its difficulty score.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch: RgbImage,
    pub source: usize,
    pub x: usize,
    pub y: usize,
    /// Compressed size of the crop in bits; larger is harder.
    pub score: usize,
}

impl PatchRecord {
    pub fn context(&self) -> ContextPatch {
        ContextPatch::from_normalized(self.patch.pixels().iter().map(|&p| normalize(p)).collect())
            .expect("64x64 patch")
    }

    /// Bottom-right quadrant, the prediction target.
    pub fn target(&self) -> RgbImage {
        self.patch.crop(TILE, TILE, TILE, TILE)
    }
}

/// Difficulty of a crop: bits after deflate with fixed Huffman codes.
pub fn difficulty(img: &RgbImage) -> usize {
    compressed_bits(img.pixels())
}

/// Scores every 64×64 crop on a 32-pixel grid and keeps the `n` hardest.
/// Ties keep raster order of the crop position.
pub fn select_patches(image: &RgbImage, source: usize, n: usize) -> Result<Vec<PatchRecord>, TrainError> {
    let (w, h) = (image.width(), image.height());
    if w < CONTEXT || h < CONTEXT {
        return Err(TrainError::ImageTooSmall { width: w, height: h });
    }
    let positions: Vec<(usize, usize)> = (0..=(h - CONTEXT) / TILE)
        .flat_map(|j| (0..=(w - CONTEXT) / TILE).map(move |i| (i * TILE, j * TILE)))
        .collect();
    let mut records: Vec<PatchRecord> = positions
        .par_iter()
        .map(|&(x, y)| {
            let patch = image.crop(x, y, CONTEXT, CONTEXT);
            let score = difficulty(&patch);
            PatchRecord {
                patch,
                source,
                x,
                y,
                score,
            }
        })
        .collect();
    // Stable sort keeps raster order among equal scores.
    records.sort_by_key(|r| std::cmp::Reverse(r.score));
    records.truncate(n);
    Ok(records)
}

/// [`select_patches`] over every image, sources numbered in order.
pub fn patch_corpus(images: &[RgbImage], per_image: usize) -> Result<Vec<PatchRecord>, TrainError> {
    let mut out = Vec::with_capacity(images.len() * per_image);
    for (i, img) in images.iter().enumerate() {
        out.extend(select_patches(img, i, per_image)?);
    }
    Ok(out)
}

/// Adam with bias correction over a subset of a model's parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub convention: LrConvention,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            convention: LrConvention::AdamStep,
            t: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Applies one update; parameters without a gradient are untouched.
    pub fn step(&mut self, params: &mut Params, grads: &[(ParamId, Vec<f32>)], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        let normalized = self.convention == LrConvention::AdamStep;
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = params.get_mut(*id).data_mut();
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                if gi != 0.0 || mi != 0.0 {
                    let delta = if normalized { step * mi / (vi.sqrt() + eps) } else { lr * mi / c1 };
                    w[i] = (w[i] as f64 - delta) as f32;
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

fn stack(items: impl Iterator<Item = Vec<f32>>, side: usize) -> Tensor {
    let data: Vec<f32> = items.flatten().collect();
    let b = data.len() / (side * side * 3);
    Tensor::new(&[b, side, side, 3], data).expect("whole patches")
}

fn collect_grads(g: &Graph, binder: &Binder, loss: Var, mask: &[bool]) -> Result<Vec<(ParamId, Vec<f32>)>, TrainError> {
    let mut grads = g.backward(loss)?;
    Ok(binder
        .bound()
        .filter(|(id, _)| mask[id.0])
        .filter_map(|(id, v)| grads.take(v).map(|gr| (id, gr)))
        .collect())
}

fn mask_for(model: &CodecModel, phase: Phase) -> Vec<bool> {
    let layout = model.layout();
    let range = match phase {
        Phase::Context => layout.context_params.clone(),
        Phase::Residual => layout.residual_params.clone(),
    };
    (0..layout.specs.len()).map(|i| range.contains(&i)).collect()
}

/// Shuffled minibatch order, reshuffled each epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batches { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Mean absolute error of the context predictor on the target quadrants.
pub fn context_loss(model: &CodecModel, contexts: &Tensor, targets: &Tensor) -> Result<f32, TensorError> {
    let mut g = Graph::inference();
    let mut p = Binder::frozen(model.params());
    let x = g.constant(contexts.clone());
    let t = g.constant(targets.clone());
    let y = model.context_net().forward(&mut g, &mut p, x)?;
    let d = g.sub(y, t)?;
    let a = g.abs(d);
    let l = g.mean(a);
    Ok(g.value(l).data()[0])
}

fn normalized(img: &RgbImage) -> Vec<f32> {
    img.pixels().iter().map(|&p| normalize(p)).collect()
}

fn final_loss(recent: &[f32]) -> f32 {
    let tail = &recent[recent.len().saturating_sub(50)..];
    if tail.is_empty() {
        f32::NAN
    } else {
        (tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64) as f32
    }
}

/// Trains the context predictor of `model` in place with mean L1 loss on
/// the target quadrant.
pub fn train_context(
    corpus: &[PatchRecord],
    model: &mut CodecModel,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let contexts: Vec<Vec<f32>> = corpus.iter().map(|r| r.context().pixels().to_vec()).collect();
    let targets: Vec<Vec<f32>> = corpus.iter().map(|r| normalized(&r.target())).collect();
    let mask = mask_for(model, Phase::Context);
    let mut adam = Adam::new(model.params());
    adam.convention = cfg.lr_convention;
    let mut batches = Batches::new(corpus.len(), cfg.seed);
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let x = stack(idx.iter().map(|&i| contexts[i].clone()), CONTEXT);
        let t = stack(idx.iter().map(|&i| targets[i].clone()), TILE);
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut p = Binder::trainable(model.params(), mask.clone());
            let x = g.constant(x);
            let t = g.constant(t);
            let y = model.context_net().forward(&mut g, &mut p, x)?;
            let d = g.sub(y, t)?;
            let a = g.abs(d);
            let l = g.mean(a);
            (g.value(l).data()[0], collect_grads(&g, &p, l, &mask)?)
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        let lr = cfg.lr(step);
        adam.step(model.params_mut(), &grads, lr);
        losses.push(loss);
        log(&StepRecord {
            phase: Phase::Context,
            step,
            lr,
            loss,
        });
    }
    model.meta.context_steps += cfg.steps;
    if cfg.steps > 0 {
        model.meta.context_loss = final_loss(&losses);
    }
    Ok(())
}

/// Residual of each patch's target quadrant against the quantized
/// prediction of the frozen context model, in network units.
pub fn residual_targets(corpus: &[PatchRecord], model: &CodecModel) -> Result<Vec<Vec<f32>>, TensorError> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(CHUNK) {
        let x = stack(chunk.iter().map(|r| r.context().pixels().to_vec()), CONTEXT);
        let mut g = Graph::inference();
        let mut p = Binder::frozen(model.params());
        let x = g.constant(x);
        let y = model.context_net().forward(&mut g, &mut p, x)?;
        let pred = g.value(y).data();
        for (r, pred) in chunk.iter().zip(pred.chunks_exact(TILE * TILE * 3)) {
            let target = r.target();
            out.push(
                target
                    .pixels()
                    .iter()
                    .zip(pred)
                    .map(|(&t, &v)| normalize(t) - normalize(quantize_output(v)))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Zeroes every context-predictor weight, making the prediction mid-gray.
pub fn zero_context(model: &mut CodecModel) {
    for i in model.layout().context_params.clone() {
        model.params_mut().get_mut(ParamId(i)).data_mut().fill(0.0);
    }
}

/// Differentiable residual loss `Σ_i mean|R_0 − J_i|` over an unroll.
pub fn residual_loss(
    model: &CodecModel,
    g: &mut Graph,
    p: &mut Binder,
    r0: Tensor,
    iterations: usize,
    sampler: &mut dyn crate::nn::CodeSampler,
) -> Result<Var, TensorError> {
    let r0 = g.constant(r0);
    let recons = model.residual_net().unroll(g, p, r0, iterations, sampler)?;
    let mut total: Option<Var> = None;
    for j in recons {
        let d = g.sub(r0, j)?;
        let a = g.abs(d);
        let m = g.mean(a);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("at least one iteration"))
}

/// Trains the residual coder of `model` in place against its frozen
/// context predictor, unrolling [`TRAIN_UNROLL`] iterations with stochastic
/// binarization.
pub fn train_residual(
    corpus: &[PatchRecord],
    model: &mut CodecModel,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.ablate_context {
        zero_context(model);
    } else if model.meta.context_steps == 0 {
        return Err(TrainError::MissingContextModel);
    }
    let residuals = residual_targets(corpus, model)?;
    let mask = mask_for(model, Phase::Residual);
    let mut adam = Adam::new(model.params());
    adam.convention = cfg.lr_convention;
    let mut batches = Batches::new(corpus.len(), cfg.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise.set_stream(1);
    let mut sampler = Stochastic(noise);
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let r0 = stack(idx.iter().map(|&i| residuals[i].clone()), TILE);
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut p = Binder::trainable(model.params(), mask.clone());
            let l = residual_loss(model, &mut g, &mut p, r0, TRAIN_UNROLL, &mut sampler)?;
            (g.value(l).data()[0], collect_grads(&g, &p, l, &mask)?)
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        let lr = cfg.lr(step);
        adam.step(model.params_mut(), &grads, lr);
        losses.push(loss);
        log(&StepRecord {
            phase: Phase::Residual,
            step,
            lr,
            loss,
        });
    }
    model.meta.residual_steps += cfg.steps;
    if cfg.steps > 0 {
        model.meta.residual_loss = final_loss(&losses);
    }
    Ok(())
}
