//! Layer-wise relevance propagation.
//!
//! Relevance starts at the target-class logit and flows backwards through a
//! recorded forward pass. Dense and convolutional layers redistribute it in
//! proportion to the contributions `z_kj = a_k * w_kj`; ReLU and flatten pass
//! it through unchanged and max-pooling routes it to the winning input.
//! Bias terms take no relevance.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Conv2d, Dense, Layer, LayerKind, MaxPool2d};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PropagationRule {
    Epsilon { epsilon: f64 },
    GammaEpsilon { gamma: f64, epsilon: f64 },
    AlphaBeta { alpha: f64, beta: f64 },
}

impl PropagationRule {
    pub fn epsilon() -> Self {
        PropagationRule::Epsilon {
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn gamma_epsilon() -> Self {
        PropagationRule::GammaEpsilon {
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn alpha1_beta0() -> Self {
        PropagationRule::AlphaBeta {
            alpha: 1.0,
            beta: 0.0,
        }
    }

    pub fn alpha2_beta1() -> Self {
        PropagationRule::AlphaBeta {
            alpha: 2.0,
            beta: 1.0,
        }
    }

    /// The four rules compared in the rule sweep.
    pub fn standard_set() -> [Self; 4] {
        [
            Self::epsilon(),
            Self::gamma_epsilon(),
            Self::alpha1_beta0(),
            Self::alpha2_beta1(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            PropagationRule::Epsilon { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                bad(format!("epsilon must be positive, got {epsilon}"))
            }
            PropagationRule::GammaEpsilon { gamma, epsilon } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    bad(format!("epsilon must be positive, got {epsilon}"))
                } else if !(gamma >= 0.0 && gamma.is_finite()) {
                    bad(format!("gamma must be non-negative, got {gamma}"))
                } else {
                    Ok(())
                }
            }
            PropagationRule::AlphaBeta { alpha, beta } => {
                if !(alpha.is_finite() && beta.is_finite()) || (alpha - beta - 1.0).abs() > 1e-12 {
                    bad(format!("alpha-beta rule needs alpha - beta = 1, got {alpha}, {beta}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Short name used in reports and file names.
    pub fn name(&self) -> String {
        match *self {
            PropagationRule::Epsilon { .. } => "epsilon".into(),
            PropagationRule::GammaEpsilon { .. } => "gamma+epsilon".into(),
            PropagationRule::AlphaBeta { alpha, beta } => format!("alpha{alpha}beta{beta}"),
        }
    }

    /// Redistributes `relevance` of one downstream neuron over its
    /// contributions `(input index, z)` and adds the shares into `out`.
    fn distribute(&self, taps: &[(usize, f64)], relevance: f64, out: &mut [f64]) {
        if relevance == 0.0 {
            return;
        }
        match *self {
            PropagationRule::Epsilon { epsilon } | PropagationRule::GammaEpsilon { epsilon, .. } => {
                let total: f64 = taps.iter().map(|&(_, z)| z).sum();
                if total == 0.0 {
                    return;
                }
                let scale = relevance / (total + epsilon * total.signum());
                for &(k, z) in taps {
                    out[k] += z * scale;
                }
            }
            PropagationRule::AlphaBeta { alpha, beta } => {
                let (mut pos, mut neg) = (0.0, 0.0);
                for &(_, z) in taps {
                    if z > 0.0 {
                        pos += z;
                    } else {
                        neg += z;
                    }
                }
                // With only one sign present the other term is 0/0 = 0, and
                // the present side carries alpha - beta of the relevance.
                let (pos_coef, neg_coef) = match (pos != 0.0, neg != 0.0) {
                    (true, true) => (alpha / pos, -beta / neg),
                    (true, false) => ((alpha - beta) / pos, 0.0),
                    (false, true) => (0.0, (alpha - beta) / neg),
                    (false, false) => return,
                };
                for &(k, z) in taps {
                    let coef = if z > 0.0 { pos_coef } else { neg_coef };
                    out[k] += z * coef * relevance;
                }
            }
        }
    }

    /// The weight the rule uses when forming contributions.
    #[inline]
    fn effective_weight(&self, w: f64) -> f64 {
        match *self {
            PropagationRule::GammaEpsilon { gamma, .. } => w + gamma * w.max(0.0),
            _ => w,
        }
    }
}

impl fmt::Display for PropagationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PropagationRule {
    type Err = Error;

    /// Accepts `epsilon`, `gamma+epsilon` (or `gamma-epsilon`), and
    /// `alpha<a>beta<b>` such as `alpha1beta0`.
    fn from_str(s: &str) -> Result<Self> {
        let rule = match s {
            "epsilon" => Self::epsilon(),
            "gamma+epsilon" | "gamma-epsilon" | "gamma_epsilon" => Self::gamma_epsilon(),
            other => {
                let parsed = other.strip_prefix("alpha").and_then(|rest| {
                    let (a, b) = rest.split_once("beta")?;
                    Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?))
                });
                match parsed {
                    Some((alpha, beta)) => PropagationRule::AlphaBeta { alpha, beta },
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown rule {other:?} (expected epsilon, gamma+epsilon, alpha1beta0, alpha2beta1)"
                        )))
                    }
                }
            }
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Relevance for every layer of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceStack {
    pub rule: PropagationRule,
    pub target_class: usize,
    /// Relevance over the model input.
    pub input: Tensor,
    /// `layers[i]` is the relevance over the outputs of layer `i`.
    pub layers: Vec<Tensor>,
    pub layer_kinds: Vec<LayerKind>,
}

impl RelevanceStack {
    pub fn layer_relevance(&self, layer_index: usize) -> Result<&Tensor> {
        self.layers.get(layer_index).ok_or(Error::LayerIndexOutOfRange {
            index: layer_index,
            len: self.layers.len(),
        })
    }

    /// The seed tensor at the output layer.
    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("stack has at least one layer")
    }
}

/// Output relevance: the target logit at the target position, zero elsewhere.
pub fn init_output_relevance(logits: &Tensor, target_class: usize) -> Result<Tensor> {
    if target_class >= logits.len() {
        return Err(Error::ClassOutOfRange {
            class: target_class,
            class_count: logits.len(),
        });
    }
    let mut seed = vec![0.0; logits.len()];
    seed[target_class] = logits.data()[target_class];
    Ok(Tensor::from_parts(logits.shape().to_vec(), seed))
}

pub fn propagate_dense(
    layer: &Dense,
    input_activations: &Tensor,
    upstream: &Tensor,
    rule: &PropagationRule,
) -> Result<Tensor> {
    if input_activations.len() != layer.inputs {
        return Err(Error::InvalidArgument(format!(
            "dense layer takes {} inputs, activations have {}",
            layer.inputs,
            input_activations.len()
        )));
    }
    if upstream.len() != layer.outputs {
        return Err(Error::InvalidArgument(format!(
            "dense layer has {} outputs, upstream relevance has {}",
            layer.outputs,
            upstream.len()
        )));
    }
    Ok(Tensor::from_parts(
        input_activations.shape().to_vec(),
        dense_relevance(layer, input_activations.data(), upstream.data(), rule),
    ))
}

fn dense_relevance(layer: &Dense, a: &[f64], upstream: &[f64], rule: &PropagationRule) -> Vec<f64> {
    let mut out = vec![0.0; layer.inputs];
    let mut taps = Vec::with_capacity(layer.inputs);
    for (j, &r) in upstream.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        taps.clear();
        taps.extend(
            layer
                .row(j)
                .iter()
                .zip(a)
                .enumerate()
                .map(|(k, (&w, &ak))| (k, ak * rule.effective_weight(w))),
        );
        rule.distribute(&taps, r, &mut out);
    }
    out
}

fn conv_relevance(
    layer: &Conv2d,
    input: &Tensor,
    upstream: &[f64],
    rule: &PropagationRule,
) -> Vec<f64> {
    let s = input.shape();
    let (in_h, in_w) = (s[1], s[2]);
    let (oh, ow) = layer.output_hw(in_h, in_w).expect("validated by model");
    let a = input.data();
    let mut out = vec![0.0; a.len()];
    let mut taps = Vec::new();
    for oc in 0..layer.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = upstream[(oc * oh + oy) * ow + ox];
                if r == 0.0 {
                    continue;
                }
                taps.clear();
                layer.for_each_tap(in_h, in_w, oy, ox, |ic, ky, kx, at| {
                    let w = layer.weights[layer.weight_index(oc, ic, ky, kx)];
                    taps.push((at, a[at] * rule.effective_weight(w)));
                });
                rule.distribute(&taps, r, &mut out);
            }
        }
    }
    out
}

fn maxpool_relevance(pool: &MaxPool2d, input: &Tensor, upstream: &[f64]) -> Vec<f64> {
    let s = input.shape();
    let mut out = vec![0.0; input.len()];
    for (o, at) in pool
        .argmax_offsets(input.data(), s[0], s[1], s[2])
        .into_iter()
        .enumerate()
    {
        out[at] += upstream[o];
    }
    out
}

/// Relevance over a layer's inputs given relevance over its outputs.
pub fn propagate_layer(
    layer: &Layer,
    input_activations: &Tensor,
    upstream: &Tensor,
    rule: &PropagationRule,
) -> Result<Tensor> {
    let data = match layer {
        Layer::Dense(d) => return propagate_dense(d, input_activations, upstream, rule),
        Layer::Conv2d(c) => conv_relevance(c, input_activations, upstream.data(), rule),
        Layer::MaxPool2d(p) => maxpool_relevance(p, input_activations, upstream.data()),
        Layer::Relu | Layer::Flatten => upstream.data().to_vec(),
    };
    Tensor::new(input_activations.shape().to_vec(), data)
}

/// Runs a traced forward pass and propagates the target-class relevance
/// back to the input.
pub fn propagate_full(
    model: &Model,
    input: &Tensor,
    rule: &PropagationRule,
    target_class: usize,
) -> Result<RelevanceStack> {
    rule.validate()?;
    if target_class >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: target_class,
            class_count: model.class_count(),
        });
    }
    let (logits, trace) = model.forward_with_trace(input)?;
    let n = model.layers().len();
    let mut layers = vec![Tensor::zeros(vec![1]); n];
    let mut relevance = init_output_relevance(&logits, target_class)?;
    for i in (0..n).rev() {
        let below = propagate_layer(
            &model.layers()[i],
            &trace.entries[i].input,
            &relevance,
            rule,
        )?;
        layers[i] = relevance;
        relevance = below;
    }
    Ok(RelevanceStack {
        rule: *rule,
        target_class,
        input: relevance,
        layers,
        layer_kinds: model.layer_kinds(),
    })
}

/// Maps relevance to 8-bit grey levels with symmetric max-abs scaling:
/// zero maps to mid-grey, `+max|R|` to 255, `-max|R|` to 0.
pub fn heatmap_pixels(relevance: &Tensor) -> (usize, usize, Vec<u8>) {
    let (channels, height, width) = match *relevance.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        [n] => (1, 1, n),
        _ => (1, 1, relevance.len()),
    };
    let plane = height * width;
    let summed: Vec<f64> = (0..plane)
        .map(|p| (0..channels).map(|c| relevance.data()[c * plane + p]).sum())
        .collect();
    let max_abs = summed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pixels = summed
        .iter()
        .map(|&v| {
            let unit = if max_abs > 0.0 { v / max_abs } else { 0.0 };
            (127.5 + 127.5 * unit).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    (width, height, pixels)
}

/// Writes the relevance heatmap as a binary PGM (P5) image.
pub fn write_heatmap_pgm(relevance: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (width, height, pixels) = heatmap_pixels(relevance);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P5\n{width} {height}\n255\n")
        .and_then(|_| file.write_all(&pixels))
        .map_err(|e| Error::io(path, e))
}

/// `<sample-id>_<rule>.pgm`
pub fn heatmap_file_name(sample_id: &str, rule: &PropagationRule) -> String {
    format!("{sample_id}_{}.pgm", rule.name())
}
