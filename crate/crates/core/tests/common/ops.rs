//! Finite-difference checks of every differentiable tensor op.

use std::sync::Arc;

use tilecodec::tensor::{Padding, Tensor};

use super::{gradient_check, random_tensor, rng};

pub const EPS: f32 = 1e-3;

/// `(op, worst relative error over its inputs)` for every op.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, errs: Vec<f64>| out.push((name.to_string(), errs.into_iter().fold(0.0, f64::max)));

    let mut r = rng(13);
    let x = random_tensor(&mut r, &[2, 5, 6, 3], 0.5);
    let w = random_tensor(&mut r, &[3, 3, 3, 4], 0.5);
    let b = random_tensor(&mut r, &[4], 0.5);
    for stride in [1, 2] {
        push(
            &format!("conv2d stride {stride}"),
            gradient_check(&[x.clone(), w.clone(), b.clone()], EPS, 1, |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Same).unwrap()
            }),
        );
    }
    let xt = random_tensor(&mut r, &[2, 3, 2, 4], 0.5);
    let wt = random_tensor(&mut r, &[4, 4, 3, 4], 0.5);
    let bt = random_tensor(&mut r, &[3], 0.5);
    for stride in [1, 2] {
        push(
            &format!("conv2d_transpose stride {stride}"),
            gradient_check(&[xt.clone(), wt.clone(), bt.clone()], EPS, 2, |g, v| {
                g.conv2d_transpose(v[0], v[1], Some(v[2]), stride).unwrap()
            }),
        );
    }
    let xd = random_tensor(&mut r, &[2, 4, 4, 3], 0.5);
    let wd = random_tensor(&mut r, &[4, 4, 3, 2], 0.5);
    push(
        "depthwise_conv2d valid",
        gradient_check(&[xd.clone(), wd], EPS, 3, |g, v| {
            g.depthwise_conv2d(v[0], v[1], 1, Padding::Valid).unwrap()
        }),
    );
    let wd = random_tensor(&mut r, &[3, 3, 3, 1], 0.5);
    push(
        "depthwise_conv2d same",
        gradient_check(&[xd.clone(), wd], EPS, 4, |g, v| {
            g.depthwise_conv2d(v[0], v[1], 2, Padding::Same).unwrap()
        }),
    );
    let wp = random_tensor(&mut r, &[1, 1, 3, 5], 0.5);
    push(
        "pointwise_conv2d",
        gradient_check(&[xd, wp], EPS, 5, |g, v| g.pointwise_conv2d(v[0], v[1]).unwrap()),
    );

    let mut r = rng(14);
    let a = random_tensor(&mut r, &[3, 7], 1.0);
    let b = random_tensor(&mut r, &[3, 7], 1.0);
    let pair = [a.clone(), b];
    push("add", gradient_check(&pair, EPS, 1, |g, v| g.add(v[0], v[1]).unwrap()));
    push("sub", gradient_check(&pair, EPS, 2, |g, v| g.sub(v[0], v[1]).unwrap()));
    push("mul", gradient_check(&pair, EPS, 3, |g, v| g.mul(v[0], v[1]).unwrap()));
    let one = [a.clone()];
    push("scale", gradient_check(&one, EPS, 4, |g, v| g.scale(v[0], -1.7)));
    push("tanh", gradient_check(&one, EPS, 5, |g, v| g.tanh(v[0])));
    push("sigmoid", gradient_check(&one, EPS, 6, |g, v| g.sigmoid(v[0])));
    push("sum", gradient_check(&one, EPS, 7, |g, v| g.sum(v[0])));
    push("mean", gradient_check(&one, EPS, 8, |g, v| g.mean(v[0])));

    // Kinked ops: keep inputs away from the kinks by more than eps.
    let away: Vec<f32> = a
        .data()
        .iter()
        .map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { *v })
        .collect();
    let away = [Tensor::new(&[3, 7], away).unwrap()];
    push("relu", gradient_check(&away, EPS, 9, |g, v| g.relu(v[0])));
    push("leaky_relu", gradient_check(&away, EPS, 10, |g, v| g.leaky_relu(v[0], 0.2)));
    push("abs", gradient_check(&away, EPS, 11, |g, v| g.abs(v[0])));
    let clipped: Vec<f32> = away[0]
        .data()
        .iter()
        .map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { *v })
        .collect();
    let clipped = [Tensor::new(&[3, 7], clipped).unwrap()];
    push("clip", gradient_check(&clipped, EPS, 12, |g, v| g.clip(v[0], -0.5, 0.5)));

    let mut r = rng(15);
    let x = random_tensor(&mut r, &[2, 2, 3, 5], 1.0);
    push(
        "slice_channels",
        gradient_check(&[x.clone()], EPS, 1, |g, v| g.slice_channels(v[0], 1, 3).unwrap()),
    );
    let n = x.len();
    let idx: Arc<Vec<u32>> = Arc::new((0..n as u32).rev().chain([0, 0, 7]).collect());
    push(
        "gather",
        gradient_check(&[x], EPS, 2, move |g, v| g.gather(v[0], idx.clone(), &[n + 3]).unwrap()),
    );
    out
}
