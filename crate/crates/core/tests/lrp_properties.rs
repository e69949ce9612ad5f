mod support;

use npp_core::lrp::propagate_full;
use npp_core::{Architecture, Model, PropagationRule, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle::{naive_lrp, random_dense_net, random_input};

fn net_and_input(seed: u64, zero_bias: bool) -> (Model, Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_dense_net(&mut rng, 3, 32, zero_bias);
    let x = random_input(&mut rng, &model);
    let target = rng.random_range(0..model.class_count());
    (model, x, target)
}

fn conservation_error(model: &Model, x: &Tensor, rule: &PropagationRule, target: usize) -> f64 {
    let stack = propagate_full(model, x, rule, target).unwrap();
    let seed = stack.output().sum();
    let mut worst = (stack.input.sum() - seed).abs();
    for r in &stack.layers {
        worst = worst.max((r.sum() - seed).abs());
    }
    worst / seed.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn matches_naive_oracle_on_100_nets() {
    for seed in 0..100 {
        let (model, x, target) = net_and_input(seed, false);
        for rule in PropagationRule::standard_set() {
            let stack = propagate_full(&model, &x, &rule, target).unwrap();
            let want = naive_lrp(&model, x.data(), &rule, target);
            for (l, got) in stack.layers.iter().chain(std::iter::once(&stack.input)).enumerate() {
                for (g, w) in got.data().iter().zip(&want[l]) {
                    assert!((g - w).abs() <= 1e-9, "net {seed} {rule} layer {l}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn alpha_beta_conserves_on_50_nets() {
    for seed in 0..50 {
        let (model, x, target) = net_and_input(1000 + seed, true);
        for rule in [PropagationRule::alpha1_beta0(), PropagationRule::alpha2_beta1()] {
            let err = conservation_error(&model, &x, &rule, target);
            assert!(err <= 1e-6, "net {seed} {rule}: relative error {err}");
        }
    }
}

#[test]
fn gamma_zero_is_epsilon() {
    for seed in 0..50 {
        let (model, x, target) = net_and_input(2000 + seed, false);
        for epsilon in [1e-9, 1e-6, 1e-2] {
            let a = propagate_full(&model, &x, &PropagationRule::Epsilon { epsilon }, target).unwrap();
            let b = propagate_full(&model, &x, &PropagationRule::GammaEpsilon { gamma: 0.0, epsilon }, target)
                .unwrap();
            for (ra, rb) in a.layers.iter().chain([&a.input]).zip(b.layers.iter().chain([&b.input])) {
                for (u, v) in ra.data().iter().zip(rb.data()) {
                    assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_net_alpha_beta_conserves() {
    // Zero the biases of a conv architecture so every unit's output is fully
    // explained by its inputs.
    for seed in 0..5 {
        let mut model = Model::build(&Architecture::SmallConv, &[1, 8, 8], 3, seed).unwrap();
        for i in 0..model.layers().len() {
            let layer = match &model.layers()[i] {
                npp_core::Layer::Dense(d) => npp_core::Layer::Dense(
                    npp_core::Dense::new(d.inputs, d.outputs, d.weights.clone(), vec![0.0; d.outputs]).unwrap(),
                ),
                npp_core::Layer::Conv2d(c) => npp_core::Layer::Conv2d(
                    npp_core::Conv2d::new(
                        c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding,
                        c.weights.clone(), vec![0.0; c.out_channels],
                    )
                    .unwrap(),
                ),
                _ => continue,
            };
            model = model.replace_layer(i, layer).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for rule in [PropagationRule::alpha1_beta0(), PropagationRule::alpha2_beta1()] {
            let err = conservation_error(&model, &x, &rule, 1);
            assert!(err <= 1e-6, "conv net {seed} {rule}: {err}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_beta_conservation(seed in any::<u64>()) {
        let (model, x, target) = net_and_input(seed, true);
        for rule in [PropagationRule::alpha1_beta0(), PropagationRule::alpha2_beta1()] {
            prop_assert!(conservation_error(&model, &x, &rule, target) <= 1e-6);
        }
    }

    #[test]
    fn seed_has_one_nonzero(seed in any::<u64>()) {
        let (model, x, target) = net_and_input(seed, false);
        let stack = propagate_full(&model, &x, &PropagationRule::epsilon(), target).unwrap();
        let out = stack.output().data();
        prop_assert!(out.iter().enumerate().all(|(i, &v)| i == target || v == 0.0));
        prop_assert_eq!(out[target], model.forward(&x).unwrap().data()[target]);
    }

    /// On a single dense step the epsilon rule keeps |z| / (|z| + eps) of the
    /// relevance, so the deviation shrinks as eps does.
    #[test]
    fn epsilon_deviation_shrinks_with_epsilon(seed in any::<u64>()) {
        let (model, x, target) = net_and_input(seed, true);
        let below_output = model.layers().len() - 1;
        let deviation = |epsilon: f64| {
            let stack = propagate_full(&model, &x, &PropagationRule::Epsilon { epsilon }, target).unwrap();
            let lower = if below_output == 0 { &stack.input } else { &stack.layers[below_output - 1] };
            (lower.sum() - stack.output().sum()).abs()
        };
        let devs: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8].iter().map(|&e| deviation(e)).collect();
        for w in devs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15, "{:?}", devs);
        }
        // Bounded over the whole stack as well.
        let tiny = PropagationRule::Epsilon { epsilon: 1e-9 };
        prop_assert!(conservation_error(&model, &x, &tiny, target) <= 1e-3);
    }
}
