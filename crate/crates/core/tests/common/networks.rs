//! End-to-end gradient checks of both networks against central finite
//! differences taken parameter element by parameter element.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilecodec::context::LEAKY_SLOPE;
use tilecodec::model::{Architecture, CodecModel, ContextArch, ResidualArch};
use tilecodec::nn::{binarize_stochastic, Binder, CodeSampler, ParamId};
use tilecodec::tensor::{Graph, Tensor, Var};

use super::{rel_err, rng};

/// Perturbation for the context network, as for single ops.
const EPS: f32 = 1e-3;
/// The recurrent encoder weights have gradients near 1e-6, where rounding
/// in the f32 forward pass dominates a 1e-3 difference quotient.
const RECURRENT_EPS: f32 = 1e-2;
const SAMPLES: usize = 24;

fn small_arch() -> Architecture {
    Architecture {
        context: ContextArch {
            down: [4, 6, 6, 8],
            up: [6, 4, 4],
        },
        residual: ResidualArch {
            enc_conv: 4,
            enc_lstm: [4, 6, 8],
            dec_conv: 8,
            dec_lstm: [6, 4, 4],
        },
    }
}

/// Inputs per output of a kernel, counting only the taps a stride-2
/// transposed kernel applies to each output.
fn fan_in(name: &str, shape: &[usize]) -> usize {
    match shape {
        [kh, kw, _, _] if name.ends_with(".dw") => kh * kw,
        [4, 4, _, cin] if name.starts_with("ctx.up") || name.starts_with("res.dec") => 4 * cin,
        [kh, kw, cin, _] => kh * kw * cin,
        _ => 1,
    }
}

fn signed_uniform(r: &mut ChaCha8Rng, shape: &[usize], sign: f32, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| sign * r.random_range(lo..hi)).collect()).unwrap()
}

/// All weights share a sign per layer, so every parameter moves the
/// outputs coherently and its gradient stands well above f32 rounding.
/// `down0` maps its nonnegative input onto the negative leaky branch and
/// `down1` flips it back; every other unit sits on the positive branch.
/// With nonnegative network inputs no unit lies near a kink.
fn context_model(seed: u64) -> CodecModel {
    let mut m = CodecModel::init(small_arch(), seed);
    let mut r = rng(seed + 100);
    let specs: Vec<(String, Vec<usize>)> =
        m.layout().specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    for i in m.layout().context_params.clone() {
        let (name, shape) = &specs[i];
        let (sign, gain) = match name.as_str() {
            "ctx.down0.w" => (-1.0, 1.0 / LEAKY_SLOPE),
            "ctx.down0.b" | "ctx.down1.w" => (-1.0, 1.0),
            _ => (1.0, 1.0),
        };
        let t = if name.ends_with(".b") {
            signed_uniform(&mut r, shape, sign, 0.05, 0.15)
        } else {
            let fan = fan_in(name, shape) as f32;
            signed_uniform(&mut r, shape, sign * gain, 0.5 / fan, 1.5 / fan)
        };
        *m.params_mut().get_mut(ParamId(i)) = t;
    }
    m
}

/// Positive weights and biases as in [`context_model`], so every parameter
/// moves the reconstructions coherently. Nothing here is piecewise linear;
/// the head is kept small so every partial reconstruction stays far below
/// the residual.
fn residual_model(seed: u64) -> CodecModel {
    let mut m = CodecModel::init(small_arch(), seed);
    let mut r = rng(seed + 100);
    let specs: Vec<(String, Vec<usize>)> =
        m.layout().specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    for i in m.layout().residual_params.clone() {
        let (name, shape) = &specs[i];
        let t = if name.ends_with(".b") {
            signed_uniform(&mut r, shape, 1.0, 0.05, 0.15)
        } else {
            let gain = if name.starts_with("res.head") {
                0.1
            } else if name == "res.enc_conv.w" {
                // Keeps the encoder gates away from saturation.
                0.3
            } else {
                1.0
            };
            let fan = fan_in(name, shape) as f32;
            signed_uniform(&mut r, shape, gain, 0.5 / fan, 1.5 / fan)
        };
        *m.params_mut().get_mut(ParamId(i)) = t;
    }
    m
}

/// Relative error per parameter tensor in `ids` for the loss
/// `Σ_t mean|target_t − output_t|` over the `(output, target)` pairs
/// returned by `f`. The numeric side evaluates the loss from the f32
/// outputs in f64, so the loss itself adds no rounding. With `sample`, only
/// that many randomly chosen elements per tensor are perturbed.
fn check<F>(model: &mut CodecModel, ids: Range<usize>, eps: f32, sample: Option<usize>, f: F) -> Vec<(String, f64)>
where
    F: Fn(&CodecModel, &mut Graph, &mut Binder) -> Vec<(Var, Var)>,
{
    let n = model.params().len();
    let mask: Vec<bool> = (0..n).map(|i| ids.contains(&i)).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let mut p = Binder::trainable(model.params(), mask);
        let pairs = f(model, &mut g, &mut p);
        let means: Vec<Var> = pairs
            .into_iter()
            .map(|(y, t)| {
                let d = g.sub(t, y).unwrap();
                let a = g.abs(d);
                g.mean(a)
            })
            .collect();
        let loss = means[1..].iter().fold(means[0], |acc, &m| g.add(acc, m).unwrap());
        let grads = g.backward(loss).unwrap();
        let bound: Vec<(ParamId, Var)> = p.bound().collect();
        ids.clone()
            .map(|i| {
                let len = model.params().get(ParamId(i)).len();
                bound
                    .iter()
                    .find(|(id, _)| *id == ParamId(i))
                    .and_then(|(_, v)| grads.get(*v))
                    .map(|g| g.iter().map(|&x| x as f64).collect())
                    .unwrap_or_else(|| vec![0.0; len])
            })
            .collect()
    };
    let eval = |m: &CodecModel| -> (f64, Vec<u8>) {
        let mut g = Graph::inference();
        let mut p = Binder::frozen(m.params());
        let loss = f(m, &mut g, &mut p)
            .into_iter()
            .map(|(y, t)| {
                let (y, t) = (g.value(y).data(), g.value(t).data());
                y.iter().zip(t).map(|(&y, &t)| (t as f64 - y as f64).abs()).sum::<f64>() / y.len() as f64
            })
            .sum();
        (loss, g.branch_pattern())
    };
    let (_, base) = eval(model);
    let names: Vec<String> = model.layout().specs.iter().map(|s| s.name.clone()).collect();
    let mut pick = rng(99);
    let mut out = Vec::new();
    for (slot, i) in ids.enumerate() {
        let id = ParamId(i);
        let len = model.params().get(id).len();
        let elems: Vec<usize> = match sample {
            Some(k) if k < len => rand::seq::index::sample(&mut pick, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for j in elems {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + eps;
            let (up, up_branch) = eval(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig - eps;
            let (down, down_branch) = eval(model);
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            // Across a kink the difference quotient measures a chord.
            assert!(
                up_branch == base && down_branch == base,
                "{}[{j}]: perturbation crosses a kink",
                names[i]
            );
            a.push(analytic[slot][j]);
            num.push((up - down) / ((orig + eps) as f64 - (orig - eps) as f64));
        }
        out.push((names[i].clone(), rel_err(&a, &num)));
    }
    out
}

/// Nonnegative windows with the unknown quadrant zeroed, and targets below
/// every tanh output so the L1 loss is smooth.
fn context_batch(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let mut x = signed_uniform(&mut r, &[2, 64, 64, 3], 1.0, 0.0, 1.0);
    for b in 0..2 {
        for y in 32..64 {
            let row = ((b * 64 + y) * 64 + 32) * 3;
            x.data_mut()[row..row + 96].fill(0.0);
        }
    }
    (x, signed_uniform(&mut r, &[2, 32, 32, 3], -1.0, 2.0, 3.0))
}

pub fn context_network_errors() -> Vec<(String, f64)> {
    let mut m = context_model(1);
    let (x, t) = context_batch(2);
    let ids = m.layout().context_params.clone();
    check(&mut m, ids, EPS, None, |m, g, p| {
        let xv = g.constant(x.clone());
        let tv = g.constant(t.clone());
        vec![(m.context_net().forward(g, p, xv).unwrap(), tv)]
    })
}

/// Emits stochastic bits on its first pass and afterwards `tanh(x) + n`
/// with the noise `n = b − tanh(x₀)` frozen from that pass, so the forward
/// value is a smooth function of the weights whose derivative is exactly
/// the straight-through gradient.
struct FrozenNoise {
    offsets: std::cell::RefCell<Vec<Vec<f32>>>,
    rng: ChaCha8Rng,
}

impl CodeSampler for &FrozenNoise {
    fn sample(&mut self, iteration: usize, pre: &Tensor, squashed: &Tensor) -> Tensor {
        let mut offsets = self.offsets.borrow_mut();
        if offsets.len() == iteration {
            let mut rng = self.rng.clone();
            rng.set_stream(iteration as u64);
            let bits = binarize_stochastic(pre.data(), &mut rng).to_values();
            offsets.push(bits.iter().zip(squashed.data()).map(|(b, s)| b - s).collect());
        }
        let v = squashed.data().iter().zip(&offsets[iteration]).map(|(s, n)| s + n).collect();
        Tensor::new(squashed.shape(), v).unwrap()
    }
}

pub fn residual_network_errors() -> Vec<(String, f64)> {
    let mut m = residual_model(3);
    // Above any sum of three partials, so |R0 − J| never changes branch.
    let r0 = signed_uniform(&mut rng(4), &[2, 32, 32, 3], 1.0, 1.6, 2.0);
    let noise = FrozenNoise {
        offsets: Default::default(),
        rng: ChaCha8Rng::seed_from_u64(5),
    };
    let ids = m.layout().residual_params.clone();
    check(&mut m, ids, RECURRENT_EPS, Some(SAMPLES), |m, g, p| {
        let mut s = &noise;
        let r0 = g.constant(r0.clone());
        let recons = m.residual_net().unroll(g, p, r0, 3, &mut s).unwrap();
        recons.into_iter().map(|j| (j, r0)).collect()
    })
}
