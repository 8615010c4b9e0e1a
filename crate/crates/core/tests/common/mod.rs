//! Shared test oracles: direct-loop reference convolutions and a
//! central-difference gradient checker that never touches the autodiff path.
#![allow(dead_code)]

pub mod fixtures;
pub mod networks;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilecodec::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Nested-loop "same" (or valid) convolution, NHWC / HWIO.
pub fn reference_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    same: bool,
) -> Tensor {
    let [n, h, wd, c] = x.nhwc().unwrap();
    let (kh, kw, ci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, c);
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let xd = x.data();
    let wdt = w.data();
    let mut out = vec![0.0f32; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for i in 0..c {
                                let xv = xd[((b * h + iy as usize) * wd + ix as usize) * c + i];
                                let wv = wdt[((ky * kw + kx) * c + i) * co + o];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[o] as f64;
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc as f32;
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, co], out).unwrap()
}

/// Relative error ‖a − b‖ / max(‖a‖, ‖b‖), in double precision.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Checks the tape's gradient of `Σ c ⊙ f(inputs)` (fixed random `c`) against
/// central finite differences computed element by element in f64.
/// Returns the relative error for each input.
pub fn gradient_check<F>(inputs: &[Tensor], eps: f32, seed: u64, f: F) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars);
    let mut r = rng(seed);
    let cw = random_tensor(&mut r, g.shape(y), 1.0);
    let cvar = g.constant(cw.clone());
    let prod = g.mul(y, cvar).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let y = f(&mut g, &vars);
        g.value(y)
            .data()
            .iter()
            .zip(cw.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut errs = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*v)
            .map(|g| g.iter().map(|&x| x as f64).collect())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut work = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let h = ((orig + eps) as f64) - ((orig - eps) as f64);
            numeric.push((up - down) / h);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}
