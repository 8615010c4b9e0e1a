//! Recurrent residual autoencoder with additive reconstruction.
//!
//! Iteration `i` encodes `R_i = R_0 − J_{i−1}` into 128 bits; the decoder
//! turns those bits into a partial output `P_i` and the running
//! reconstruction is `J_i = P_0 + … + P_i`. LSTM states persist across the
//! iterations of one tile and start from zero for every tile.

use thiserror::Error;

use crate::model::{CodecModel, ResidualArch, BITS_PER_ITERATION, BOTTLENECK_DEPTH, BOTTLENECK_SIDE, K_MAX, TILE};
use crate::nn::{binary_bottleneck, Binder, BinaryCode, CodeLengthError, CodeSampler, Conv, ConvLstm, ConvLstmState, Registry, Resample};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResidualError {
    #[error("iteration count {0} outside 1..={K_MAX}")]
    IterationCount(usize),
    #[error(transparent)]
    CodeLength(#[from] CodeLengthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `round(clamp(v·142 + 128, 0, 255))`, ties away from zero.
#[inline]
pub fn quantize_output(v: f32) -> u8 {
    (v as f64 * 142.0 + 128.0).clamp(0.0, 255.0).round() as u8
}

/// A 32×32×3 residual in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTile {
    values: Vec<f32>,
}

impl ResidualTile {
    pub fn new(values: Vec<f32>) -> Option<Self> {
        (values.len() == TILE * TILE * 3 && values.iter().all(|v| v.is_finite())).then_some(ResidualTile { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, TILE, TILE, 3], self.values.clone()).expect("fixed size")
    }
}

/// One iteration's output: partial reconstruction `P_i`, running sum `J_i`
/// and the bits that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub partial: Vec<f32>,
    pub reconstruction: Vec<f32>,
    pub code: BinaryCode,
}

/// Parameter handles of the residual autoencoder.
#[derive(Debug, Clone)]
pub struct ResidualNet {
    pub enc_conv: Conv,
    pub enc: Vec<ConvLstm>,
    pub bottleneck: Conv,
    pub dec_conv: Conv,
    pub dec: Vec<ConvLstm>,
    pub head: Conv,
}

/// Recurrent state of one half of the autoencoder.
#[derive(Debug, Clone, Default)]
pub struct LstmStack {
    states: Vec<Option<ConvLstmState>>,
}

impl LstmStack {
    pub fn new(layers: usize) -> Self {
        LstmStack {
            states: vec![None; layers],
        }
    }
}

impl ResidualNet {
    pub fn register(reg: &mut Registry, arch: &ResidualArch) -> Self {
        let enc_conv = Conv::register(reg, "res.enc_conv", 3, 3, arch.enc_conv, 1, true);
        let mut in_c = arch.enc_conv;
        let mut enc = Vec::new();
        for (i, &d) in arch.enc_lstm.iter().enumerate() {
            enc.push(ConvLstm::register(reg, &format!("res.enc{i}"), in_c, d, Resample::Down));
            in_c = d;
        }
        let bottleneck = Conv::register(reg, "res.bottleneck", 1, in_c, BOTTLENECK_DEPTH, 1, true);
        let dec_conv = Conv::register(reg, "res.dec_conv", 1, BOTTLENECK_DEPTH, arch.dec_conv, 1, true);
        in_c = arch.dec_conv;
        let mut dec = Vec::new();
        for (i, &d) in arch.dec_lstm.iter().enumerate() {
            dec.push(ConvLstm::register(reg, &format!("res.dec{i}"), in_c, d, Resample::Up));
            in_c = d;
        }
        let head = Conv::register(reg, "res.head", 1, in_c, 3, 1, true);
        ResidualNet {
            enc_conv,
            enc,
            bottleneck,
            dec_conv,
            dec,
            head,
        }
    }

    pub fn encoder_state(&self) -> LstmStack {
        LstmStack::new(self.enc.len())
    }

    pub fn decoder_state(&self) -> LstmStack {
        LstmStack::new(self.dec.len())
    }

    /// Encoder half: `batch × 32 × 32 × 3` residual to bottleneck
    /// pre-activations `batch × 4 × 4 × 8`.
    pub fn encode_step(&self, g: &mut Graph, p: &mut Binder, x: Var, st: &mut LstmStack) -> Result<Var, TensorError> {
        let mut h = self.enc_conv.forward(g, p, x)?;
        for (layer, state) in self.enc.iter().zip(st.states.iter_mut()) {
            let (out, next) = layer.step(g, p, h, *state)?;
            *state = Some(next);
            h = out;
        }
        self.bottleneck.forward(g, p, h)
    }

    /// Decoder half: `batch × 4 × 4 × 8` code to partial output `P_i`.
    pub fn decode_step(&self, g: &mut Graph, p: &mut Binder, code: Var, st: &mut LstmStack) -> Result<Var, TensorError> {
        let mut h = self.dec_conv.forward(g, p, code)?;
        for (layer, state) in self.dec.iter().zip(st.states.iter_mut()) {
            let (out, next) = layer.step(g, p, h, *state)?;
            *state = Some(next);
            h = out;
        }
        let out = self.head.forward(g, p, h)?;
        Ok(g.tanh(out))
    }

    /// Differentiable unroll over `iterations` steps. Returns each `J_i`.
    pub fn unroll(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        r0: Var,
        iterations: usize,
        sampler: &mut dyn CodeSampler,
    ) -> Result<Vec<Var>, TensorError> {
        let mut enc = self.encoder_state();
        let mut dec = self.decoder_state();
        let mut recon: Option<Var> = None;
        let mut out = Vec::with_capacity(iterations);
        for i in 0..iterations {
            let input = match recon {
                Some(j) => g.sub(r0, j)?,
                None => r0,
            };
            let pre = self.encode_step(g, p, input, &mut enc)?;
            let code = binary_bottleneck(g, pre, i, sampler)?;
            let partial = self.decode_step(g, p, code, &mut dec)?;
            let j = match recon {
                Some(j) => g.add(j, partial)?,
                None => partial,
            };
            recon = Some(j);
            out.push(j);
        }
        Ok(out)
    }
}

fn code_tensor(code: &BinaryCode) -> Tensor {
    Tensor::new(&[1, BOTTLENECK_SIDE, BOTTLENECK_SIDE, BOTTLENECK_DEPTH], code.to_values()).expect("128 bits")
}

/// Decoder half driven by received codes. Both the encoder's internal
/// reconstruction and the real decoder run through this type, so they agree
/// bit for bit.
pub struct ResidualDecoder<'m> {
    net: &'m crate::residual::ResidualNet,
    graph: Graph,
    binder: Binder<'m>,
    state: LstmStack,
    recon: Option<Var>,
}

impl<'m> ResidualDecoder<'m> {
    pub fn new(model: &'m CodecModel) -> Self {
        let net = model.residual_net();
        ResidualDecoder {
            net,
            graph: Graph::inference(),
            binder: Binder::frozen(model.params()),
            state: net.decoder_state(),
            recon: None,
        }
    }

    /// Consumes one code; returns `(P_i, J_i)`.
    pub fn step(&mut self, code: &BinaryCode) -> Result<(Vec<f32>, Vec<f32>), ResidualError> {
        code.expect_len(BITS_PER_ITERATION)?;
        let g = &mut self.graph;
        let c = g.constant(code_tensor(code));
        let partial = self.net.decode_step(g, &mut self.binder, c, &mut self.state)?;
        let j = match self.recon {
            Some(j) => g.add(j, partial)?,
            None => partial,
        };
        self.recon = Some(j);
        Ok((g.value(partial).data().to_vec(), g.value(j).data().to_vec()))
    }

    pub fn reconstruction(&self) -> Option<&[f32]> {
        self.recon.map(|j| self.graph.value(j).data())
    }
}

/// Incremental encoder for one tile. Each [`step`](Self::step) emits one
/// more iteration, so stopping after `k` steps yields exactly the first `k`
/// iterations of any longer run.
pub struct ResidualEncoder<'m> {
    net: &'m ResidualNet,
    graph: Graph,
    binder: Binder<'m>,
    r0: Var,
    state: LstmStack,
    decoder: ResidualDecoder<'m>,
    iteration: usize,
}

impl<'m> ResidualEncoder<'m> {
    pub fn new(model: &'m CodecModel, r0: &ResidualTile) -> Self {
        let net = model.residual_net();
        let mut graph = Graph::inference();
        let r0 = graph.constant(r0.to_tensor());
        ResidualEncoder {
            net,
            graph,
            binder: Binder::frozen(model.params()),
            r0,
            state: net.encoder_state(),
            decoder: ResidualDecoder::new(model),
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, sampler: &mut dyn CodeSampler) -> Result<IterationOutput, ResidualError> {
        let g = &mut self.graph;
        let input = match self.decoder.reconstruction() {
            Some(j) => {
                let j = g.constant(Tensor::new(&[1, TILE, TILE, 3], j.to_vec())?);
                g.sub(self.r0, j)?
            }
            None => self.r0,
        };
        let pre = self.net.encode_step(g, &mut self.binder, input, &mut self.state)?;
        let squashed = g.tanh(pre);
        let values = sampler.sample(self.iteration, g.value(pre), g.value(squashed));
        let code = BinaryCode::from_signs(values.data().iter().map(|&v| if v > 0.0 { 1 } else { -1 }).collect())
            .expect("signs are ±1");
        let (partial, reconstruction) = self.decoder.step(&code)?;
        self.iteration += 1;
        Ok(IterationOutput {
            partial,
            reconstruction,
            code,
        })
    }
}

/// Encodes `r0` with `k` iterations.
pub fn encode_residual(
    model: &CodecModel,
    r0: &ResidualTile,
    k: usize,
    sampler: &mut dyn CodeSampler,
) -> Result<Vec<IterationOutput>, ResidualError> {
    if !(1..=K_MAX).contains(&k) {
        return Err(ResidualError::IterationCount(k));
    }
    let mut enc = ResidualEncoder::new(model, r0);
    (0..k).map(|_| enc.step(sampler)).collect()
}

/// Reconstructs `J_{k−1}` from `k` codes. With no codes the residual is zero.
pub fn decode_residual(codes: &[BinaryCode], model: &CodecModel) -> Result<Vec<f32>, ResidualError> {
    let mut dec = ResidualDecoder::new(model);
    for c in codes {
        dec.step(c)?;
    }
    Ok(dec
        .reconstruction()
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; TILE * TILE * 3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantizer_examples() {
        assert_eq!(quantize_output(0.0), 128);
        assert_eq!(quantize_output(1.0), 255);
        assert_eq!(quantize_output(-1.0), 0);
        assert_eq!(quantize_output(1.0 / 142.0), 129);
        // 0.25·142 + 128 = 163.5 exactly; ties round up.
        assert_eq!(quantize_output(0.25), 164);
        assert_eq!(quantize_output(-0.25), 93);
        assert_eq!(quantize_output(f32::MAX), 255);
    }

    #[test]
    fn iteration_count_is_bounded() {
        let model = CodecModel::zeros(crate::model::Architecture::toy());
        let r0 = ResidualTile::new(vec![0.0; TILE * TILE * 3]).unwrap();
        let mut s = crate::nn::Deterministic;
        assert_eq!(
            encode_residual(&model, &r0, 0, &mut s).unwrap_err(),
            ResidualError::IterationCount(0)
        );
        assert_eq!(
            encode_residual(&model, &r0, K_MAX + 1, &mut s).unwrap_err(),
            ResidualError::IterationCount(K_MAX + 1)
        );
    }

    #[test]
    fn malformed_code_is_rejected() {
        let model = CodecModel::zeros(crate::model::Architecture::toy());
        let code = BinaryCode::from_bits([true; 100]);
        assert!(matches!(
            decode_residual(&[code], &model),
            Err(ResidualError::CodeLength(CodeLengthError { expected: 128, actual: 100 }))
        ));
    }
}
