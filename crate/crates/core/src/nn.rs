//! Composite layers: parameter registry, convolutional LSTM cell, the
//! channel-wise fully-connected block and the binary bottleneck.

use std::sync::Arc;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::tensor::{Graph, Padding, Tensor, TensorError, Var};

/// Index of a learned tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal (cut at two standard deviations) whose spread is set
    /// by the [`InitScheme`]. `fan_in` counts the inputs feeding one output.
    Weight { fan_in: usize },
    Const(f32),
}

/// Spread of the weight initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// The same standard deviation for every weight.
    Fixed(f32),
    /// Standard deviation `gain / √fan_in`.
    FanIn(f32),
}

impl InitScheme {
    pub fn sigma(self, fan_in: usize) -> f32 {
        match self {
            InitScheme::Fixed(s) => s,
            InitScheme::FanIn(gain) => gain / (fan_in.max(1) as f32).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Collects parameter specs in declaration order while a network is built.
#[derive(Debug, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Learned tensors, shared cheaply with graphs during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Vec<Arc<Tensor>>,
}

impl Params {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Params {
            tensors: tensors.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        Self::from_tensors(specs.iter().map(|s| Tensor::zeros(&s.shape)).collect())
    }

    pub fn init(specs: &[ParamSpec], scheme: InitScheme, rng: &mut dyn RngCore) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let data = match s.init {
                    Init::Const(v) => vec![v; s.len()],
                    Init::Weight { fan_in } => {
                        let sigma = scheme.sigma(fan_in);
                        (0..s.len()).map(|_| truncated_normal(rng, sigma)).collect()
                    }
                };
                Tensor::new(&s.shape, data).expect("spec shapes are non-empty")
            })
            .collect();
        Self::from_tensors(tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.tensors[id.0].clone()
    }
}

fn truncated_normal(rng: &mut dyn RngCore, sigma: f32) -> f32 {
    loop {
        let z: f32 = rng.sample(rand_distr::StandardNormal);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Binds parameters into one graph, creating each leaf at most once so that
/// weights reused across recurrent iterations accumulate a single gradient.
pub struct Binder<'p> {
    params: &'p Params,
    vars: Vec<Option<Var>>,
    trainable: Option<Vec<bool>>,
}

impl<'p> Binder<'p> {
    /// All parameters are constants.
    pub fn frozen(params: &'p Params) -> Self {
        Binder {
            params,
            vars: vec![None; params.len()],
            trainable: None,
        }
    }

    /// Parameters flagged in `trainable` become gradient-tracked leaves.
    pub fn trainable(params: &'p Params, trainable: Vec<bool>) -> Self {
        Binder {
            params,
            vars: vec![None; params.len()],
            trainable: Some(trainable),
        }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let rg = self.trainable.as_ref().is_some_and(|t| t[id.0]);
        let v = g.leaf(self.params.shared(id), rg);
        self.vars[id.0] = Some(v);
        v
    }

    /// Leaves created so far, by parameter index.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        reg: &mut Registry,
        name: &str,
        k: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = reg.add(format!("{name}.w"), &[k, k, in_c, out_c], Init::Weight { fan_in: k * k * in_c });
        let bias = bias.then(|| reg.add(format!("{name}.b"), &[out_c], Init::Const(0.0)));
        Conv { weight, bias, stride }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var, TensorError> {
        let w = p.var(g, self.weight);
        let b = self.bias.map(|b| p.var(g, b));
        g.conv2d(x, w, b, self.stride, Padding::Same)
    }
}

/// Upsampling convolution with bias.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn register(reg: &mut Registry, name: &str, k: usize, in_c: usize, out_c: usize) -> Self {
        // Stride 2 applies a quarter of the taps to each output.
        let fan_in = (k * k / 4).max(1) * in_c;
        UpConv {
            weight: reg.add(format!("{name}.w"), &[k, k, out_c, in_c], Init::Weight { fan_in }),
            bias: reg.add(format!("{name}.b"), &[out_c], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var, TensorError> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv2d_transpose(x, w, Some(b), 2)
    }
}

/// Hidden and cell state of a convolutional LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Stride-2 3×3 convolution on the input path.
    Down,
    /// Stride-2 4×4 upsampling convolution on the input path.
    Up,
    /// Unit-stride 3×3 convolution on the input path.
    Keep,
}

/// Convolutional LSTM cell. Gates (input, forget, output, candidate) are
/// computed by a convolution of the input plus a 1×1 convolution of the
/// previous hidden state; no peephole connections.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    pub input_weight: ParamId,
    pub bias: ParamId,
    pub hidden_weight: ParamId,
    pub resample: Resample,
    pub depth: usize,
}

impl ConvLstm {
    pub fn register(
        reg: &mut Registry,
        name: &str,
        in_c: usize,
        depth: usize,
        resample: Resample,
    ) -> Self {
        let gates = 4 * depth;
        let input_weight = match resample {
            Resample::Up => reg.add(format!("{name}.wx"), &[4, 4, gates, in_c], Init::Weight { fan_in: 4 * in_c }),
            Resample::Down | Resample::Keep => {
                reg.add(format!("{name}.wx"), &[3, 3, in_c, gates], Init::Weight { fan_in: 9 * in_c })
            }
        };
        let bias = reg.add(format!("{name}.b"), &[gates], Init::Const(0.0));
        let hidden_weight = reg.add(format!("{name}.wh"), &[1, 1, depth, gates], Init::Weight { fan_in: depth });
        ConvLstm {
            input_weight,
            bias,
            hidden_weight,
            resample,
            depth,
        }
    }

    /// One recurrent step. `state == None` is the all-zero initial state.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        x: Var,
        state: Option<ConvLstmState>,
    ) -> Result<(Var, ConvLstmState), TensorError> {
        let wx = p.var(g, self.input_weight);
        let b = p.var(g, self.bias);
        let mut gates = match self.resample {
            Resample::Up => g.conv2d_transpose(x, wx, Some(b), 2)?,
            Resample::Down => g.conv2d(x, wx, Some(b), 2, Padding::Same)?,
            Resample::Keep => g.conv2d(x, wx, Some(b), 1, Padding::Same)?,
        };
        if let Some(s) = state {
            let gs = g.shape(gates);
            let hs = g.shape(s.hidden);
            if gs[..3] != hs[..3] || hs[3] != self.depth || g.shape(s.cell) != hs {
                return Err(crate::tensor::TensorError::ShapeMismatch {
                    op: "conv_lstm_step",
                    detail: format!(
                        "state {:?}/{:?} vs gate map {gs:?} of depth {}",
                        hs,
                        g.shape(s.cell),
                        self.depth
                    ),
                });
            }
            let wh = p.var(g, self.hidden_weight);
            let rec = g.pointwise_conv2d(s.hidden, wh)?;
            gates = g.add(gates, rec)?;
        }
        let d = self.depth;
        let i = g.slice_channels(gates, 0, d)?;
        let f = g.slice_channels(gates, d, d)?;
        let o = g.slice_channels(gates, 2 * d, d)?;
        let c = g.slice_channels(gates, 3 * d, d)?;
        let i = g.sigmoid(i);
        let o = g.sigmoid(o);
        let c = g.tanh(c);
        let fresh = g.mul(i, c)?;
        let cell = match state {
            Some(s) => {
                let f = g.sigmoid(f);
                let kept = g.mul(f, s.cell)?;
                g.add(kept, fresh)?
            }
            None => fresh,
        };
        let squashed = g.tanh(cell);
        let hidden = g.mul(o, squashed)?;
        Ok((hidden, ConvLstmState { hidden, cell }))
    }
}

/// Channel-wise fully-connected block: each channel's `s×s` map is fully
/// connected to an `s×s` map of the same channel (a full-extent depthwise
/// convolution with multiplier `s²`), followed by a 1×1 convolution mixing
/// channels. No biases.
#[derive(Debug, Clone)]
pub struct ChannelwiseFc {
    pub spatial: ParamId,
    pub mixing: ParamId,
    pub extent: usize,
    pub channels: usize,
}

impl ChannelwiseFc {
    pub fn register(reg: &mut Registry, name: &str, extent: usize, channels: usize) -> Self {
        let s2 = extent * extent;
        ChannelwiseFc {
            spatial: reg.add(format!("{name}.dw"), &[extent, extent, channels, s2], Init::Weight { fan_in: s2 }),
            mixing: reg.add(format!("{name}.pw"), &[1, 1, channels, channels], Init::Weight { fan_in: channels }),
            extent,
            channels,
        }
    }

    pub fn parameter_count(extent: usize, channels: usize) -> usize {
        let s2 = extent * extent;
        s2 * s2 * channels + channels * channels
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var, TensorError> {
        let [n, h, w, c] = g.value(x).nhwc()?;
        if h != self.extent || w != self.extent || c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "channelwise_fc",
                detail: format!(
                    "input {h}x{w}x{c}, expected {0}x{0}x{1}",
                    self.extent, self.channels
                ),
            });
        }
        let dw = p.var(g, self.spatial);
        let pooled = self.spatial_stage(g, x, dw, n)?;
        let pw = p.var(g, self.mixing);
        g.pointwise_conv2d(pooled, pw)
    }

    /// Depthwise stage alone, reshaped back to `s × s × channels`.
    pub fn spatial_stage(&self, g: &mut Graph, x: Var, dw: Var, batch: usize) -> Result<Var, TensorError> {
        let (s, c) = (self.extent, self.channels);
        let s2 = s * s;
        let flat = g.depthwise_conv2d(x, dw, 1, Padding::Valid)?;
        // depthwise output channel c·s² + j holds spatial position j of channel c.
        let mut idx = Vec::with_capacity(batch * s2 * c);
        for b in 0..batch {
            for j in 0..s2 {
                for ch in 0..c {
                    idx.push((b * c * s2 + ch * s2 + j) as u32);
                }
            }
        }
        g.gather(flat, Arc::new(idx), &[batch, s, s, c])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("binary code has {actual} bits, expected {expected}")]
pub struct CodeLengthError {
    pub expected: usize,
    pub actual: usize,
}

/// Bits emitted by one bottleneck evaluation, each −1 or +1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode(Vec<i8>);

impl BinaryCode {
    pub fn from_signs(signs: Vec<i8>) -> Option<Self> {
        signs.iter().all(|&s| s == 1 || s == -1).then_some(BinaryCode(signs))
    }

    /// `true` encodes +1.
    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        BinaryCode(bits.into_iter().map(|b| if b { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn signs(&self) -> &[i8] {
        &self.0
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().map(|&s| s > 0)
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] = -self.0[i];
    }

    pub fn to_values(&self) -> Vec<f32> {
        self.0.iter().map(|&s| s as f32).collect()
    }

    pub fn expect_len(&self, expected: usize) -> Result<(), CodeLengthError> {
        if self.0.len() != expected {
            return Err(CodeLengthError {
                expected,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Run-time binarization: +1 iff `x ≥ 0`, i.e. `sign(tanh(x))` with ties to +1.
pub fn binarize_deterministic(x: &[f32]) -> BinaryCode {
    BinaryCode(x.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect())
}

/// Training-time binarization: each bit is +1 with probability
/// `(1 + tanh(x)) / 2`.
pub fn binarize_stochastic(x: &[f32], rng: &mut dyn RngCore) -> BinaryCode {
    BinaryCode(
        x.iter()
            .map(|&v| {
                let p = 0.5 * (1.0 + crate::tensor::tanh(v));
                if rng.random::<f32>() < p {
                    1
                } else {
                    -1
                }
            })
            .collect(),
    )
}

/// Decides the bottleneck's forward values. The graph passes the incoming
/// gradient straight through to `tanh(x)`, whatever values are returned.
pub trait CodeSampler {
    /// `pre` is the bottleneck pre-activation `x`, `squashed` is `tanh(x)`.
    fn sample(&mut self, iteration: usize, pre: &Tensor, squashed: &Tensor) -> Tensor;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Deterministic;

impl CodeSampler for Deterministic {
    fn sample(&mut self, _iteration: usize, pre: &Tensor, _squashed: &Tensor) -> Tensor {
        let v = binarize_deterministic(pre.data()).to_values();
        Tensor::new(pre.shape(), v).expect("same shape")
    }
}

pub struct Stochastic<R: RngCore>(pub R);

impl<R: RngCore> CodeSampler for Stochastic<R> {
    fn sample(&mut self, _iteration: usize, pre: &Tensor, _squashed: &Tensor) -> Tensor {
        let v = binarize_stochastic(pre.data(), &mut self.0).to_values();
        Tensor::new(pre.shape(), v).expect("same shape")
    }
}

/// Bottleneck: 1×1 convolution, tanh, then binarization with a
/// straight-through gradient. Returns the code variable.
pub fn binary_bottleneck(
    g: &mut Graph,
    pre: Var,
    iteration: usize,
    sampler: &mut dyn CodeSampler,
) -> Result<Var, TensorError> {
    let squashed = g.tanh(pre);
    let values = sampler.sample(iteration, g.value(pre), g.value(squashed));
    g.straight_through(squashed, values)
}
