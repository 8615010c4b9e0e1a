mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilecodec::context::{build_context, predict_tile, ContextPatch};
use tilecodec::image_io::RgbImage;
use tilecodec::model::{Architecture, CodecModel, BITS_PER_ITERATION, CONTEXT, INIT_SIGMA, K_MAX, TILE};
use tilecodec::nn::{
    binarize_deterministic, binarize_stochastic, Binder, ChannelwiseFc, ConvLstm, Deterministic, Init, InitScheme,
    ParamId, Params, Registry, Resample, Stochastic,
};
use tilecodec::residual::{decode_residual, encode_residual, quantize_output, ResidualError, ResidualTile};
use tilecodec::tensor::{Graph, Tensor};

use common::fixtures::{fuzz_image, quantize_oracle, random_model};
use common::random_tensor;

#[test]
fn channelwise_fc_size_against_dense() {
    assert_eq!(ChannelwiseFc::parameter_count(4, 512), 393_216);
    let dense = (4 * 4 * 512usize).pow(2);
    assert!(dense as f64 / 393_216.0 >= 170.0);
    let m = CodecModel::zeros(Architecture::published());
    let n: usize = m.layout().specs.iter().filter(|s| s.name.starts_with("ctx.cfc.")).map(|s| s.len()).sum();
    assert_eq!(n, 393_216);
}

#[test]
fn channelwise_fc_matches_per_channel_dense_layers() {
    let (s, c) = (4, 3);
    let mut reg = Registry::new();
    let layer = ChannelwiseFc::register(&mut reg, "cfc", s, c);
    let mut r = common::rng(1);
    let params = Params::from_tensors(reg.specs().iter().map(|sp| random_tensor(&mut r, &sp.shape, 1.0)).collect());
    let x = random_tensor(&mut r, &[2, s, s, c], 1.0);
    let mut g = Graph::inference();
    let mut p = Binder::frozen(&params);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &mut p, xv).unwrap();
    let (dw, pw) = (params.get(layer.spatial).data(), params.get(layer.mixing).data());
    let s2 = s * s;
    for b in 0..2 {
        for j in 0..s2 {
            // Channel ch's dense map, then mixing across channels.
            let spatial: Vec<f64> = (0..c)
                .map(|ch| {
                    (0..s2)
                        .map(|q| x.data()[(b * s2 + q) * c + ch] as f64 * dw[(q * c + ch) * s2 + j] as f64)
                        .sum()
                })
                .collect();
            for o in 0..c {
                let want: f64 = (0..c).map(|ch| spatial[ch] * pw[ch * c + o] as f64).sum();
                let got = g.value(y).data()[(b * s2 + j) * c + o] as f64;
                assert!((got - want).abs() < 1e-4, "b={b} j={j} o={o}: {got} vs {want}");
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn conv_lstm_matches_scalar_recurrence() {
    let mut reg = Registry::new();
    let cell = ConvLstm::register(&mut reg, "lstm", 1, 1, Resample::Keep);
    let mut r = common::rng(2);
    let params = Params::from_tensors(reg.specs().iter().map(|sp| random_tensor(&mut r, &sp.shape, 1.0)).collect());
    // On a 1x1 map only the centre tap of the 3x3 input kernel is used.
    let wx: Vec<f64> = (0..4).map(|j| params.get(cell.input_weight).data()[4 * 4 + j] as f64).collect();
    let b: Vec<f64> = params.get(cell.bias).data().iter().map(|&v| v as f64).collect();
    let wh: Vec<f64> = params.get(cell.hidden_weight).data().iter().map(|&v| v as f64).collect();

    let xs = [0.7, -1.2, 0.3, 2.0];
    let (mut h, mut c) = (0.0f64, 0.0f64);
    let mut g = Graph::inference();
    let mut p = Binder::frozen(&params);
    let mut state = None;
    for &x in &xs {
        let gate = |j: usize| wx[j] * x + b[j] + wh[j] * h;
        let (i, f, o, cand) = (sigmoid(gate(0)), sigmoid(gate(1)), sigmoid(gate(2)), gate(3).tanh());
        c = f * c + i * cand;
        h = o * c.tanh();
        let xv = g.constant(Tensor::new(&[1, 1, 1, 1], vec![x as f32]).unwrap());
        let (out, next) = cell.step(&mut g, &mut p, xv, state).unwrap();
        state = Some(next);
        assert!((g.value(out).data()[0] as f64 - h).abs() < 1e-6);
        assert!((g.value(next.cell).data()[0] as f64 - c).abs() < 1e-6);
    }
}

#[test]
fn fixed_init_statistics() {
    let m = CodecModel::init(Architecture::toy(), 9);
    for (spec, t) in m.layout().specs.iter().zip(m.params().iter()) {
        match spec.init {
            Init::Const(v) => assert!(t.data().iter().all(|&x| x == v), "{}", spec.name),
            Init::Weight { .. } => {
                assert!(t.data().iter().all(|x| x.abs() <= 2.0 * INIT_SIGMA), "{}", spec.name);
            }
        }
    }
    // Pooled moments: a normal truncated at 2σ has std 0.8796σ.
    let all: Vec<f64> = m
        .layout()
        .specs
        .iter()
        .zip(m.params().iter())
        .filter(|(s, _)| matches!(s.init, Init::Weight { .. }))
        .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64))
        .collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 4.0 * std / n.sqrt(), "mean {mean}");
    assert!((std / INIT_SIGMA as f64 - 0.8796).abs() < 0.01, "std {std}");
    assert_eq!(InitScheme::Fixed(0.02).sigma(1000), 0.02);
    assert_eq!(InitScheme::FanIn(2.0).sigma(16), 0.5);
}

#[test]
fn deterministic_binarizer_is_sign_of_tanh() {
    let xs: Vec<f32> = (-50..=50).map(|i| i as f32 * 0.1).chain([0.0, -0.0, f32::MIN_POSITIVE, -f32::MIN_POSITIVE]).collect();
    let code = binarize_deterministic(&xs);
    for (&x, &s) in xs.iter().zip(code.signs()) {
        assert_eq!(s, if (x as f64).tanh() >= 0.0 { 1 } else { -1 }, "x={x}");
    }
}

#[test]
fn stochastic_binarizer_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for x in [-1.5f32, -0.3, 0.0, 0.4, 1.1] {
        let n = 20_000;
        let mean = binarize_stochastic(&vec![x; n], &mut rng).signs().iter().map(|&s| s as f64).sum::<f64>() / n as f64;
        let t = (x as f64).tanh();
        let se = ((1.0 - t * t) / n as f64).sqrt();
        assert!((mean - t).abs() <= 4.0 * se, "x={x}: mean {mean}, tanh {t}");
    }
}

#[test]
fn quantizer_matches_direct_formula() {
    for i in 0..20_001 {
        let v = -1.2 + 2.4 * i as f32 / 20_000.0;
        assert_eq!(quantize_output(v), quantize_oracle(v), "v={v}");
    }
    assert_eq!(quantize_output(-10.0), 0);
    assert_eq!(quantize_output(10.0), 255);
    assert_eq!(quantize_output(1.0 / 142.0), 129);
    assert_eq!(quantize_output(0.0), 128);
}

fn random_residual(seed: u64) -> ResidualTile {
    let mut r = common::rng(seed);
    ResidualTile::new((0..TILE * TILE * 3).map(|_| r.random_range(-0.5..0.5)).collect()).unwrap()
}

#[test]
fn every_iteration_emits_128_bits_and_sums_partials() {
    let m = random_model(4);
    let outs = encode_residual(&m, &random_residual(5), K_MAX, &mut Deterministic).unwrap();
    let mut sum = vec![0.0f32; TILE * TILE * 3];
    for o in &outs {
        assert_eq!(o.code.len(), BITS_PER_ITERATION);
        for (s, p) in sum.iter_mut().zip(&o.partial) {
            *s += p;
        }
        for (s, j) in sum.iter().zip(&o.reconstruction) {
            assert!((s - j).abs() < 1e-5);
        }
    }
}

#[test]
fn decoder_reproduces_encoder_reconstruction() {
    let m = random_model(6);
    let outs = encode_residual(&m, &random_residual(7), 5, &mut Stochastic(common::rng(8))).unwrap();
    for k in 1..=5 {
        let codes: Vec<_> = outs[..k].iter().map(|o| o.code.clone()).collect();
        assert_eq!(decode_residual(&codes, &m).unwrap(), outs[k - 1].reconstruction);
    }
    assert_eq!(decode_residual(&[], &m).unwrap(), vec![0.0; TILE * TILE * 3]);
}

#[test]
fn prefix_of_longer_run_equals_shorter_run() {
    let m = random_model(9);
    let r0 = random_residual(10);
    let long = encode_residual(&m, &r0, 8, &mut Deterministic).unwrap();
    let short = encode_residual(&m, &r0, 3, &mut Deterministic).unwrap();
    assert_eq!(&long[..3], &short[..]);
    assert!(matches!(
        encode_residual(&m, &r0, 0, &mut Deterministic),
        Err(ResidualError::IterationCount(0))
    ));
}

#[test]
fn context_predictions_stay_in_range() {
    let m = random_model(11);
    let mut r = common::rng(12);
    let ctx = ContextPatch::from_normalized((0..CONTEXT * CONTEXT * 3).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap();
    let p = predict_tile(&ctx, &m).unwrap();
    assert_eq!(p.pixels.len(), TILE * TILE * 3);
    assert!(p.pixels.iter().all(|v| v.abs() < 1.0));
}

#[test]
fn border_tiles_see_neutral_padding() {
    let img = RgbImage::filled(40, 40, [255; 3]).unwrap();
    let ctx = build_context(&img, 1, 1).unwrap();
    let px = ctx.pixels();
    let at = |x: usize, y: usize| px[(y * CONTEXT + x) * 3];
    // Window origin is (0, 0); tile (1, 1) starts at pixel 32, image ends at 40.
    assert_eq!(at(0, 0), (255.0 - 128.0) / 142.0);
    assert_eq!(at(39, 0), (255.0 - 128.0) / 142.0);
    assert_eq!(at(40, 0), 0.0);
    assert_eq!(at(0, 40), 0.0);
    assert_eq!(at(50, 50), 0.0);
    assert!(build_context(&img, 2, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unknown_pixels_never_reach_the_predictor(seed in any::<u64>(), row in 0usize..3, col in 0usize..3) {
        let m = random_model(13);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = fuzz_image(&mut r, 96, 96);
        let mut b = a.clone();
        // Scramble the target tile and everything after it in raster order.
        for y in row * TILE..96 {
            for x in 0..96 {
                if y >= (row + 1) * TILE || x >= col * TILE {
                    b.set_pixel(x, y, [r.random(), r.random(), r.random()]);
                }
            }
        }
        let pa = predict_tile(&build_context(&a, row, col).unwrap(), &m).unwrap();
        let pb = predict_tile(&build_context(&b, row, col).unwrap(), &m).unwrap();
        prop_assert_eq!(pa, pb);
    }
}

#[test]
fn weights_shared_across_iterations_get_one_gradient() {
    let m = random_model(14);
    let ids = m.layout().residual_params.clone();
    let mask: Vec<bool> = (0..m.params().len()).map(|i| ids.contains(&i)).collect();
    let mut g = Graph::new();
    let mut p = Binder::trainable(m.params(), mask);
    let r0 = g.constant(random_residual(15).to_tensor());
    m.residual_net().unroll(&mut g, &mut p, r0, 3, &mut Deterministic).unwrap();
    let bound: Vec<ParamId> = p.bound().map(|(id, _)| id).collect();
    let mut unique = bound.clone();
    unique.dedup();
    assert_eq!(bound.len(), unique.len());
    assert_eq!(bound.len(), ids.len());
}
