//! Finite-difference checks of the analytic input and parameter gradients.

mod common;

use common::*;
use featurefool::net3d::{softmax_cross_entropy, Layer, ReluMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_type_matches_central_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, shape) in layer_cases(&mut rng) {
            let e = layer_gradient_error(&layer, shape, &mut rng);
            assert!(e < TOL, "{} seed {seed}: relative error {e}", layer.name());
        }
    }
}

#[test]
fn composite_model_matches_central_differences() {
    for seed in 0..5 {
        let e = model_gradient_error(seed);
        assert!(e < TOL, "seed {seed}: relative error {e}");
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = two_layer_model(&mut rng);
    let s = m.input_shape();
    let x = loop {
        let x = random_volume(&mut rng, [s.channels, s.frames, s.height, s.width]);
        // one weight or bias step moves a pre-activation by at most STEP
        if relu_margin(&m, &x) > 2.0 * STEP {
            break x;
        }
    };
    let label = 2;
    let loss = |mm: &featurefool::net3d::Model3D| {
        let t = mm.forward_volume(x.clone()).unwrap();
        softmax_cross_entropy(t.logits(), label).0
    };
    let trace = m.forward_volume(x.clone()).unwrap();
    let (_, g) = softmax_cross_entropy(trace.logits(), label);
    let grads = m.backward_params(&trace, &g).unwrap();
    for (li, lg) in grads.0.iter().enumerate() {
        let Some((gw, gb)) = lg else { continue };
        for (which, analytic) in [(0, gw), (1, gb)] {
            let fd: Vec<f64> = (0..analytic.len())
                .map(|j| {
                    let eval = |delta: f64| {
                        let mut mm = m.clone();
                        let (w, b) = match &mut mm.layers_mut()[li] {
                            Layer::Conv3d(c) => (&mut c.weight, &mut c.bias),
                            Layer::Linear(l) => (&mut l.weight, &mut l.bias),
                            _ => unreachable!(),
                        };
                        if which == 0 {
                            w[j] += delta
                        } else {
                            b[j] += delta
                        }
                        loss(&mm)
                    };
                    (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
                })
                .collect();
            let e = rel_err(analytic, &fd);
            assert!(e < TOL, "layer {li} part {which}: relative error {e}");
        }
    }
}

#[test]
fn guided_rule_differs_from_standard_only_by_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = two_layer_model(&mut rng);
    let s = m.input_shape();
    let x = random_volume(&mut rng, [s.channels, s.frames, s.height, s.width]);
    let trace = m.forward_volume(x).unwrap();
    let seed = [0.0, 1.0, 0.0];
    let std = m.scoped(ReluMode::Standard).backward_input(&trace, &seed).unwrap();
    let guided = m.scoped(ReluMode::Guided).backward_input(&trace, &seed).unwrap();
    assert_eq!(std.shape, guided.shape);
    assert_ne!(std.data, guided.data);
    assert_eq!(m.relu_mode(), ReluMode::Standard);
}
