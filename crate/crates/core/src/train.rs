//! Mini-batch SGD with softmax cross-entropy.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::{round_f32, Layer};
use crate::model::Model;
use crate::tensor::{axpy, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradient buffers laid out like `Layer::parameters`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| l.parameters().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
        }
    }

    fn reset(&mut self) {
        for layer in &mut self.layers {
            for buf in layer {
                buf.fill(0.0);
            }
        }
    }
}

/// Accumulates the gradient of the cross-entropy loss for one sample into
/// `grads` and returns the loss.
fn accumulate_sample(
    model: &Model,
    input: &Tensor,
    label: usize,
    first_trainable: usize,
    grads: &mut Gradients,
) -> Result<f64> {
    let layers = model.layers();
    let mut acts: Vec<Tensor> = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for layer in layers {
        let next = layer.forward(acts.last().expect("non-empty"));
        acts.push(next);
    }
    let logits = acts.last().expect("non-empty").data();
    let loss = cross_entropy(logits, label);
    let mut grad: Vec<f64> = softmax(logits);
    grad[label] -= 1.0;

    for (i, layer) in layers.iter().enumerate().rev() {
        let x = &acts[i];
        let need_input_grad = i > first_trainable;
        let buffers = &mut grads.layers[i];
        grad = match layer {
            Layer::Dense(d) => {
                let (gw, rest) = buffers.split_at_mut(1);
                let gw = &mut gw[0];
                let gb = &mut rest[0];
                let a = x.data();
                for (j, &g) in grad.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, a, &mut gw[j * d.inputs..(j + 1) * d.inputs]);
                        gb[j] += g;
                    }
                }
                if need_input_grad {
                    let mut gin = vec![0.0; d.inputs];
                    for (j, &g) in grad.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, d.row(j), &mut gin);
                        }
                    }
                    gin
                } else {
                    Vec::new()
                }
            }
            Layer::Conv2d(c) => {
                let s = x.shape();
                let (in_h, in_w) = (s[1], s[2]);
                let (oh, ow) = c.output_hw(in_h, in_w).expect("validated");
                let a = x.data();
                let (gw, rest) = buffers.split_at_mut(1);
                let gw = &mut gw[0];
                let gb = &mut rest[0];
                let mut gin = if need_input_grad {
                    vec![0.0; a.len()]
                } else {
                    Vec::new()
                };
                for oc in 0..c.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[(oc * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            gb[oc] += g;
                            c.for_each_tap(in_h, in_w, oy, ox, |ic, ky, kx, at| {
                                let wi = c.weight_index(oc, ic, ky, kx);
                                gw[wi] += g * a[at];
                                if need_input_grad {
                                    gin[at] += g * c.weights[wi];
                                }
                            });
                        }
                    }
                }
                gin
            }
            Layer::MaxPool2d(p) => {
                if !need_input_grad {
                    Vec::new()
                } else {
                    let s = x.shape();
                    let mut gin = vec![0.0; x.len()];
                    for (o, at) in p
                        .argmax_offsets(x.data(), s[0], s[1], s[2])
                        .into_iter()
                        .enumerate()
                    {
                        gin[at] += grad[o];
                    }
                    gin
                }
            }
            Layer::Relu => x
                .data()
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Flatten => grad,
        };
        if !need_input_grad {
            break;
        }
    }
    Ok(loss)
}

fn first_trainable(model: &Model) -> usize {
    model
        .layers()
        .iter()
        .position(|l| l.parameter_count() > 0)
        .unwrap_or(0)
}

/// Mean loss and mean parameter gradients over a batch of samples.
pub fn loss_and_gradients(model: &Model, batch: &[(Tensor, usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = Gradients::zeros_like(model);
    let first = first_trainable(model);
    let mut loss = 0.0;
    for (x, y) in batch {
        check_sample(model, x, *y)?;
        loss += accumulate_sample(model, x, *y, first, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    for layer in &mut grads.layers {
        for buf in layer {
            buf.iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok((loss * scale, grads))
}

/// Mean cross-entropy loss over a batch.
pub fn loss(model: &Model, batch: &[(Tensor, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batch {
        check_sample(model, x, *y)?;
        total += cross_entropy(model.forward(x)?.data(), *y);
    }
    Ok(total / batch.len() as f64)
}

fn check_sample(model: &Model, x: &Tensor, label: usize) -> Result<()> {
    if label >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: label,
            class_count: model.class_count(),
        });
    }
    if x.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: model.input_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Trains a copy of `model` on `dataset` and records the dataset's sample
/// hashes as the model's training fingerprint.
///
/// Parameters are rounded to `f32` precision at the end so that the trained
/// model round-trips through the model file format bit for bit.
pub fn train(model: &Model, dataset: &LabeledDataset, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in dataset.samples() {
        check_sample(model, &s.input, s.label)?;
    }

    let mut trained = model.clone();
    let mut metadata = trained.metadata().clone();
    metadata.seed = config.seed;
    metadata
        .training_fingerprint
        .extend(dataset.samples().iter().map(|s| s.hash));

    if config.epochs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut grads = Gradients::zeros_like(&trained);
        let first = first_trainable(&trained);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                grads.reset();
                for &i in batch {
                    let s = &dataset.samples()[i];
                    epoch_loss += accumulate_sample(&trained, &s.input, s.label, first, &mut grads)?;
                }
                let step = config.learning_rate / batch.len() as f64;
                for (layer, layer_grads) in trained.layers_mut().iter_mut().zip(&grads.layers) {
                    for (params, g) in layer.parameters_mut().into_iter().zip(layer_grads) {
                        axpy(-step, g, params);
                    }
                }
            }
            debug!(
                "epoch {}/{}: mean loss {:.4}",
                epoch + 1,
                config.epochs,
                epoch_loss / dataset.len() as f64
            );
        }
        for layer in trained.layers_mut() {
            for params in layer.parameters_mut() {
                params.iter_mut().for_each(|v| *v = round_f32(*v));
            }
        }
        if trained
            .layers()
            .iter()
            .flat_map(|l| l.parameters())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidModel(
                "training diverged (non-finite parameters); lower the learning rate".into(),
            ));
        }
    }
    Ok(trained.with_metadata(metadata))
}
