//! Naive reference implementations for all-dense networks and a random
//! network generator. Everything here works from raw weight arrays with
//! explicit loops and shares no code with the library's propagation.

#![allow(dead_code, clippy::needless_range_loop)]

use npp_core::{Dense, Layer, Model, ModelMetadata, PropagationRule, Tensor};
use rand::Rng;

/// Random Dense/ReLU stack with 1..=max_dense dense layers of width
/// 1..=max_width (the last one being the output layer, width >= 2).
pub fn random_dense_net<R: Rng>(rng: &mut R, max_dense: usize, max_width: usize, zero_bias: bool) -> Model {
    let dense_count = rng.random_range(1..=max_dense);
    let inputs = rng.random_range(1..=max_width);
    let mut layers = Vec::new();
    let mut fan_in = inputs;
    for i in 0..dense_count {
        let last = i + 1 == dense_count;
        let outputs = if last {
            rng.random_range(2..=max_width.clamp(2, 10))
        } else {
            rng.random_range(1..=max_width)
        };
        let weights = (0..fan_in * outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..outputs)
            .map(|_| if zero_bias { 0.0 } else { rng.random_range(-0.5..0.5) })
            .collect();
        layers.push(Layer::Dense(Dense::new(fan_in, outputs, weights, bias).unwrap()));
        if !last {
            layers.push(Layer::Relu);
        }
        fan_in = outputs;
    }
    Model::new(vec![inputs], layers, fan_in, ModelMetadata::default()).unwrap()
}

pub fn random_input<R: Rng>(rng: &mut R, model: &Model) -> Tensor {
    let n: usize = model.input_shape().iter().product();
    Tensor::new(
        model.input_shape().to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Activations entering each layer, followed by the logits.
pub fn naive_activations(model: &Model, input: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = vec![input.to_vec()];
    for layer in model.layers() {
        let x = acts.last().unwrap();
        let y = match layer {
            Layer::Dense(d) => {
                let mut y = vec![0.0; d.outputs];
                for j in 0..d.outputs {
                    let mut s = d.bias[j];
                    for i in 0..d.inputs {
                        s += d.weights[j * d.inputs + i] * x[i];
                    }
                    y[j] = s;
                }
                y
            }
            Layer::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::Flatten => x.clone(),
            other => panic!("naive oracle handles dense nets only, got {:?}", other.kind()),
        };
        acts.push(y);
    }
    acts
}

pub fn naive_forward(model: &Model, input: &[f64]) -> Vec<f64> {
    naive_activations(model, input).pop().unwrap()
}

/// Relevance at the output of every layer (index-aligned with the model's
/// layers) and, as the final element, at the input.
pub fn naive_lrp(model: &Model, input: &[f64], rule: &PropagationRule, target: usize) -> Vec<Vec<f64>> {
    let acts = naive_activations(model, input);
    let n = model.layers().len();
    let logits = &acts[n];
    let mut r = vec![0.0; logits.len()];
    r[target] = logits[target];
    let mut per_layer = vec![Vec::new(); n + 1];
    for l in (0..n).rev() {
        per_layer[l] = r.clone();
        let a = &acts[l];
        r = match &model.layers()[l] {
            Layer::Dense(d) => naive_dense_step(d, a, &r, rule),
            _ => r,
        };
    }
    per_layer[n] = r;
    per_layer
}

fn naive_dense_step(d: &Dense, a: &[f64], upper: &[f64], rule: &PropagationRule) -> Vec<f64> {
    let w = |j: usize, i: usize| d.weights[j * d.inputs + i];
    let mut lower = vec![0.0; d.inputs];
    for i in 0..d.inputs {
        let mut sum = 0.0;
        for j in 0..d.outputs {
            let share = match *rule {
                PropagationRule::Epsilon { epsilon } => {
                    let z: f64 = (0..d.inputs).map(|q| a[q] * w(j, q)).sum();
                    if z == 0.0 {
                        0.0
                    } else {
                        let stab = if z > 0.0 { z + epsilon } else { z - epsilon };
                        a[i] * w(j, i) / stab
                    }
                }
                PropagationRule::GammaEpsilon { gamma, epsilon } => {
                    let wg = |q: usize| {
                        let v = w(j, q);
                        if v > 0.0 { v * (1.0 + gamma) } else { v }
                    };
                    let z: f64 = (0..d.inputs).map(|q| a[q] * wg(q)).sum();
                    if z == 0.0 {
                        0.0
                    } else {
                        let stab = if z > 0.0 { z + epsilon } else { z - epsilon };
                        a[i] * wg(i) / stab
                    }
                }
                PropagationRule::AlphaBeta { alpha, beta } => {
                    let zs: Vec<f64> = (0..d.inputs).map(|q| a[q] * w(j, q)).collect();
                    let pos: f64 = zs.iter().filter(|&&z| z > 0.0).sum();
                    let neg: f64 = zs.iter().filter(|&&z| z < 0.0).sum();
                    let zi = zs[i];
                    if pos != 0.0 && neg != 0.0 {
                        if zi > 0.0 {
                            alpha * zi / pos
                        } else if zi < 0.0 {
                            -beta * zi / neg
                        } else {
                            0.0
                        }
                    } else if pos != 0.0 {
                        if zi > 0.0 { (alpha - beta) * zi / pos } else { 0.0 }
                    } else if neg != 0.0 {
                        if zi < 0.0 { (alpha - beta) * zi / neg } else { 0.0 }
                    } else {
                        0.0
                    }
                }
            };
            sum += share * upper[j];
        }
        lower[i] = sum;
    }
    lower
}
