//! Shared finite-difference oracle for gradient tests.
#![allow(dead_code)]

use featurefool::net3d::{Conv3d, Layer, Linear, MaxPool3d, Model3D, ReluMode, Volume};
use featurefool::vidcore::VideoShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &Volume, f: impl Fn(&Volume) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = p.data[i];
        p.data[i] = orig + STEP;
        let hi = f(&p);
        p.data[i] = orig - STEP;
        let lo = f(&p);
        p.data[i] = orig;
        out.push((hi - lo) / (2.0 * STEP));
    }
    out
}

pub fn random_volume(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Volume {
    let n = shape.iter().product();
    Volume::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values that keep every pairwise gap and every magnitude above
/// `gap`, so neither ReLU nor max-pool switches under a `STEP` perturbation.
pub fn spread_volume(rng: &mut ChaCha8Rng, shape: [usize; 4], gap: f64) -> Volume {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap * 2.0)
        .collect();
    for i in (1..n).rev() {
        levels.swap(i, rng.gen_range(0..=i));
    }
    Volume::from_vec(shape, levels).unwrap()
}

/// One instance of every layer type, each with its input shape.
pub fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<(Layer, [usize; 4])> {
    let mut conv = Conv3d::zeros(2, 3, [3, 2, 3], [1, 2, 1], [1, 1, 0]);
    conv.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    let mut lin = Linear::zeros(24, 5);
    lin.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    lin.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    vec![
        (Layer::Conv3d(conv), [2, 3, 5, 4]),
        (Layer::Relu, [2, 2, 3, 3]),
        (Layer::MaxPool3d(MaxPool3d { kernel: [2, 2, 2], stride: [2, 1, 2] }), [2, 4, 3, 4]),
        (Layer::Flatten, [2, 2, 3, 2]),
        (Layer::Linear(lin), [24, 1, 1, 1]),
    ]
}

/// Relative error between `backward` (standard rule) and finite differences
/// of the scalar `r · layer(x)` for a random projection `r`.
pub fn layer_gradient_error(layer: &Layer, shape: [usize; 4], rng: &mut ChaCha8Rng) -> f64 {
    let x = match layer {
        Layer::Relu | Layer::MaxPool3d(_) => spread_volume(rng, shape, 0.01),
        _ => random_volume(rng, shape),
    };
    let out_shape = layer.out_shape(shape).unwrap();
    let r = random_volume(rng, out_shape);
    let analytic = layer.backward(&x, &r, ReluMode::Standard);
    let f = |v: &Volume| {
        let y = layer.forward(v).unwrap();
        y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
    };
    rel_err(&analytic.data, &central_diff(&x, f))
}

/// Conv → ReLU → Flatten → Linear on a `4×1×5×5` clip.
pub fn two_layer_model(rng: &mut ChaCha8Rng) -> Model3D {
    let mut conv = Conv3d::zeros(1, 2, [3, 3, 3], [1, 1, 1], [1, 1, 1]);
    conv.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    let mut lin = Linear::zeros(2 * 4 * 5 * 5, 3);
    lin.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    Model3D::new(
        vec![Layer::Conv3d(conv), Layer::Relu, Layer::Flatten, Layer::Linear(lin)],
        VideoShape::new(4, 1, 5, 5),
        3,
    )
    .unwrap()
}

/// Smallest |pre-activation| over every ReLU in the model.
pub fn relu_margin(m: &Model3D, x: &Volume) -> f64 {
    let trace = m.forward_volume(x.clone()).unwrap();
    m.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .flat_map(|(i, _)| trace.activations[i].data.clone())
        .fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

/// Relative error of the composite model's input gradient of `r · logits`.
pub fn model_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = two_layer_model(&mut rng);
    let s = m.input_shape();
    let shape = [s.channels, s.frames, s.height, s.width];
    // a perturbation of STEP moves any pre-activation by at most
    // max|w|·STEP < STEP, so a margin of 2·STEP keeps ReLUs fixed
    let x = loop {
        let x = random_volume(&mut rng, shape);
        if relu_margin(&m, &x) > 2.0 * STEP {
            break x;
        }
    };
    let r: Vec<f64> = (0..m.num_classes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let trace = m.forward_volume(x.clone()).unwrap();
    let analytic = m.scoped(ReluMode::Standard).backward_input(&trace, &r).unwrap();
    let f = |v: &Volume| {
        let t = m.forward_volume(v.clone()).unwrap();
        t.logits().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
    };
    rel_err(&analytic.data, &central_diff(&x, f))
}
