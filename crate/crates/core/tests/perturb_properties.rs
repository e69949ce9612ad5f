use npp_core::data::{synth_blobs, LabeledDataset, Split};
use npp_core::eval::class_metrics;
use npp_core::lrp::PropagationRule;
use npp_core::perturb::{analyze, apply_mask, build_mask, perturb, unlearn, AnalysisConfig, PerturbMode, UnlearnConfig};
use npp_core::train::{train, TrainConfig};
use npp_core::{Error, Model, Tensor};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn param_bits(model: &Model) -> Vec<u64> {
    model
        .layers()
        .iter()
        .flat_map(|l| l.parameters().into_iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

/// flatten, dense(16), relu, dense(12), relu, dense(out); layer 3 is the
/// analysis layer.
fn net(seed: u64) -> Model {
    Model::build(&"mlp-16-12".parse().unwrap(), &[1, 3, 3], 4, seed).unwrap()
}

fn fuzz(seed: u64, n: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![1, 3, 3], (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
        .collect()
}

#[test]
fn zero_fraction_is_bitwise_identity() {
    let model = net(1);
    let probe = synth_blobs(4, 6, 9, 2)
        .into_samples()
        .into_iter()
        .filter(|s| s.label == 2)
        .map(|s| npp_core::data::Sample::from_tensor(s.input.reshape(vec![1, 3, 3]).unwrap(), 2))
        .collect();
    let probe = LabeledDataset::new(probe, 4, Split::Probe).unwrap();
    let config = AnalysisConfig { target_class: 2, rule: PropagationRule::epsilon(), layer: None, k: 4 };
    let set = analyze(&model, &probe, &config).unwrap();
    for mode in [PerturbMode::Zero, PerturbMode::Gauss { sigma_factor: 1.0 }] {
        let out = perturb(&model, &set, 0.0, mode).unwrap();
        assert!(out.selection.positions.is_empty());
        assert_eq!(param_bits(&out.model), param_bits(&model));
    }
}

#[test]
fn thousand_input_fuzz_locality_and_dead_neurons() {
    let model = net(3);
    let layer = model.default_analysis_layer().unwrap();
    assert_eq!(layer, 3);
    let positions = [0, 5, 7, 11];
    let mask = build_mask(&model, layer, &positions, PerturbMode::Zero).unwrap();
    let masked = apply_mask(&model, &mask).unwrap();
    for x in fuzz(4, 1000) {
        let (_, before) = model.forward_with_trace(&x).unwrap();
        let (_, after) = masked.forward_with_trace(&x).unwrap();
        for i in 0..layer {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before.entries[i].output), bits(&after.entries[i].output), "layer {i}");
        }
        for &p in &positions {
            assert_eq!(after.entries[layer].output.data()[p], 0.0);
            assert_eq!(after.entries[layer + 1].output.data()[p], 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_mask_properties(seed in any::<u64>(), count in 0usize..=12) {
        let model = net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = sample(&mut rng, 12, count).into_vec();
        let mask = build_mask(&model, 3, &positions, PerturbMode::Zero).unwrap();
        let once = apply_mask(&model, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        prop_assert_eq!(param_bits(&once), param_bits(&twice));

        let identity = build_mask(&model, 3, &[], PerturbMode::Zero).unwrap();
        prop_assert_eq!(param_bits(&apply_mask(&model, &identity).unwrap()), param_bits(&model));

        for x in fuzz(seed, 8) {
            let (_, trace) = once.forward_with_trace(&x).unwrap();
            for &p in &positions {
                prop_assert_eq!(trace.entries[3].output.data()[p], 0.0);
            }
        }
    }
}

fn blob_images(per_class: usize, seed: u64) -> LabeledDataset {
    let raw = synth_blobs(4, per_class, 9, seed);
    let samples = raw
        .into_samples()
        .into_iter()
        .map(|s| npp_core::data::Sample::from_tensor(s.input.reshape(vec![1, 3, 3]).unwrap(), s.label))
        .collect();
    LabeledDataset::new(samples, 4, Split::Train).unwrap()
}

fn trained_net() -> (Model, LabeledDataset) {
    let data = blob_images(60, 10);
    let config = TrainConfig { learning_rate: 0.05, epochs: 8, batch_size: 16, seed: 10 };
    (train(&net(10), &data, &config).unwrap(), data)
}

#[test]
fn training_sample_in_probe_set_aborts() {
    let (model, data) = trained_net();
    let probe_samples: Vec<_> = data.samples().iter().filter(|s| s.label == 1).take(3).cloned().collect();
    let probe = LabeledDataset::new(probe_samples, 4, Split::Probe).unwrap();
    let config = UnlearnConfig {
        analysis: AnalysisConfig { target_class: 1, rule: PropagationRule::epsilon(), layer: None, k: 4 },
        m_p: 0.5,
        mode: PerturbMode::Zero,
    };
    match unlearn(&model, &probe, &config) {
        Err(Error::ZeroShotViolation { overlap }) => assert_eq!(overlap, 3),
        other => panic!("expected a zero-shot violation, got {other:?}"),
    }
}

#[test]
fn unlearning_lowers_target_accuracy() {
    let (model, _) = trained_net();
    let test = blob_images(40, 11).with_split(Split::Test);
    let probe = test.filter(Split::Probe, |s| s.label == 1).take(10);
    let config = UnlearnConfig {
        analysis: AnalysisConfig { target_class: 1, rule: PropagationRule::epsilon(), layer: None, k: 4 },
        m_p: 0.5,
        mode: PerturbMode::Zero,
    };
    let out = unlearn(&model, &probe, &config).unwrap();
    let z = out.neuron_set.z();
    let taken = out.selection.positions.len();
    assert_eq!(out.selection.requested, 6);
    assert_eq!(taken, z.min(6));
    assert_eq!(out.selection.capped, z < 6);
    assert_eq!(out.selection.positions[..], out.neuron_set.positions()[..taken]);
    let before = class_metrics(&model, &test, 1).unwrap();
    let after = class_metrics(&out.model, &test, 1).unwrap();
    assert!(after.a_t <= before.a_t, "{before:?} -> {after:?}");
    let wrong_label = test.filter(Split::Probe, |s| s.label == 2).take(2);
    assert!(unlearn(&model, &wrong_label, &config).is_err());
}
