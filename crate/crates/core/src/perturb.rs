//! Neuronal path perturbation: masks over a dense layer's incoming weights
//! and the end-to-end unlearning pipeline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_disjoint, LabeledDataset};
use crate::error::{Error, Result};
use crate::layer::{round_f32, Dense, Layer};
use crate::lrp::{propagate_full, PropagationRule};
use crate::model::Model;
use crate::path::{
    accumulate_frequency, build_neuron_set, select_targets, top_k_for_sample, NeuronSet,
    RankedNeuronList, TargetSelection,
};

/// Salt mixed into the model seed for noise draws.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PerturbMode {
    /// Zero the incoming weights and bias of each selected neuron.
    Zero,
    /// Add Gaussian noise with `sigma = sigma_factor * std(layer weights)`.
    Gauss { sigma_factor: f64 },
    /// Add Laplacian noise with `b = b_factor * std(layer weights)`.
    Laplace { b_factor: f64 },
}

impl PerturbMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbMode::Gauss { sigma_factor: f } | PerturbMode::Laplace { b_factor: f }
                if !(f > 0.0 && f.is_finite()) =>
            {
                Err(Error::InvalidArgument(format!(
                    "noise factor must be positive, got {f}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbMode::Zero => "zero",
            PerturbMode::Gauss { .. } => "gauss",
            PerturbMode::Laplace { .. } => "laplace",
        }
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    /// `zero`, `gauss`, `laplace`, optionally with a factor: `gauss:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, factor) = match s.split_once(':') {
            Some((n, f)) => (
                n,
                f.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad noise factor in {s:?}")))?,
            ),
            None => (s, 1.0),
        };
        let mode = match name {
            "zero" => PerturbMode::Zero,
            "gauss" | "gaussian" => PerturbMode::Gauss {
                sigma_factor: factor,
            },
            "laplace" | "laplacian" => PerturbMode::Laplace { b_factor: factor },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown mode {s:?} (expected zero, gauss or laplace)"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Binary mask over a dense layer's `outputs x inputs` weight matrix: rows
/// of selected neurons are 0, all other rows 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMask {
    pub layer_index: usize,
    pub mode: PerturbMode,
    pub positions: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    matrix: Vec<u8>,
}

impl PerturbationMask {
    /// Entry `(row, col)` of the mask matrix.
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.matrix[row * self.cols + col]
    }

    pub fn matrix(&self) -> &[u8] {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn masked_rows(&self) -> Vec<bool> {
        let mut rows = vec![false; self.rows];
        for &p in &self.positions {
            rows[p] = true;
        }
        rows
    }
}

pub fn build_mask(
    model: &Model,
    layer_index: usize,
    positions: &[usize],
    mode: PerturbMode,
) -> Result<PerturbationMask> {
    mode.validate()?;
    let dense = model.dense(layer_index)?;
    let mut seen = vec![false; dense.outputs];
    for &p in positions {
        if p >= dense.outputs {
            return Err(Error::InvalidArgument(format!(
                "position {p} out of range for a layer of width {}",
                dense.outputs
            )));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("duplicate position {p}")));
        }
    }
    let mut matrix = vec![1u8; dense.outputs * dense.inputs];
    for &p in positions {
        matrix[p * dense.inputs..(p + 1) * dense.inputs].fill(0);
    }
    Ok(PerturbationMask {
        layer_index,
        mode,
        positions: positions.to_vec(),
        rows: dense.outputs,
        cols: dense.inputs,
        matrix,
    })
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Applies a mask and returns the perturbed model. Zero mode multiplies the
/// weights by the mask and zeroes the masked biases; the noise modes add
/// seeded noise to the masked rows only.
pub fn apply_mask(model: &Model, mask: &PerturbationMask) -> Result<Model> {
    let dense = model.dense(mask.layer_index)?;
    if dense.outputs != mask.rows || dense.inputs != mask.cols {
        return Err(Error::InvalidArgument(format!(
            "mask is {}x{} but layer {} is {}x{}",
            mask.rows, mask.cols, mask.layer_index, dense.outputs, dense.inputs
        )));
    }
    if mask.is_identity() {
        return Ok(model.clone());
    }
    let masked = mask.masked_rows();
    let mut weights = dense.weights.clone();
    let mut bias = dense.bias.clone();
    match mask.mode {
        PerturbMode::Zero => {
            for (w, &m) in weights.iter_mut().zip(&mask.matrix) {
                if m == 0 {
                    *w = 0.0;
                }
            }
            for (b, &is_masked) in bias.iter_mut().zip(&masked) {
                if is_masked {
                    *b = 0.0;
                }
            }
        }
        PerturbMode::Gauss { sigma_factor: factor } | PerturbMode::Laplace { b_factor: factor } => {
            let scale = factor * population_std(&dense.weights);
            let mut rng = ChaCha8Rng::seed_from_u64(model.metadata().seed ^ NOISE_STREAM);
            let gauss = Normal::new(0.0, scale.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for (row, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
                for w in &mut weights[row * dense.inputs..(row + 1) * dense.inputs] {
                    let noise = match mask.mode {
                        PerturbMode::Gauss { .. } => gauss.sample(&mut rng),
                        _ => sample_laplace(&mut rng, scale),
                    };
                    *w = round_f32(*w + noise);
                }
            }
        }
    }
    let layer = Dense::new(dense.inputs, dense.outputs, weights, bias)?;
    model.replace_layer(mask.layer_index, Layer::Dense(layer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub target_class: usize,
    pub rule: PropagationRule,
    /// Dense layer to analyse; defaults to the last dense layer before the output.
    pub layer: Option<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub analysis: AnalysisConfig,
    pub m_p: f64,
    pub mode: PerturbMode,
}

/// Validates a probe set against a model: non-empty, every sample of the
/// target class, and none of it in the model's training fingerprint.
pub fn check_probe_set(model: &Model, probe_set: &LabeledDataset, target_class: usize) -> Result<()> {
    if probe_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if target_class >= model.class_count() {
        return Err(Error::ClassOutOfRange {
            class: target_class,
            class_count: model.class_count(),
        });
    }
    if let Some(s) = probe_set.samples().iter().find(|s| s.label != target_class) {
        return Err(Error::InvalidArgument(format!(
            "probe sample labeled {} but the unlearning class is {target_class}",
            s.label
        )));
    }
    check_disjoint(probe_set.samples(), &model.metadata().training_fingerprint)
}

/// Relevance analysis: per-probe top-k lists, occurrence counts and the
/// ranked neuron set of the analysed layer.
pub fn analyze(model: &Model, probe_set: &LabeledDataset, config: &AnalysisConfig) -> Result<NeuronSet> {
    check_probe_set(model, probe_set, config.target_class)?;
    config.rule.validate()?;
    let layer = match config.layer {
        Some(l) => l,
        None => model.default_analysis_layer()?,
    };
    model.dense(layer)?;
    let lists: Vec<RankedNeuronList> = probe_set
        .samples()
        .par_iter()
        .map(|s| {
            let stack = propagate_full(model, &s.input, &config.rule, config.target_class)?;
            top_k_for_sample(&stack, layer, config.k)
        })
        .collect::<Result<_>>()?;
    build_neuron_set(&accumulate_frequency(&lists)?)
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub model: Model,
    pub mask: PerturbationMask,
    pub selection: TargetSelection,
}

/// Selects `m_p` of the analysed layer from the neuron set and applies the mask.
pub fn perturb(model: &Model, set: &NeuronSet, m_p: f64, mode: PerturbMode) -> Result<Perturbation> {
    let dense = model.dense(set.layer_index)?;
    if dense.outputs != set.width {
        return Err(Error::InvalidArgument(format!(
            "neuron set is for a layer of width {}, layer {} has {}",
            set.width, set.layer_index, dense.outputs
        )));
    }
    let selection = select_targets(set, m_p)?;
    let mask = build_mask(model, set.layer_index, &selection.positions, mode)?;
    Ok(Perturbation {
        model: apply_mask(model, &mask)?,
        mask,
        selection,
    })
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: Model,
    pub neuron_set: NeuronSet,
    pub mask: PerturbationMask,
    pub selection: TargetSelection,
}

/// The full training-free pipeline: zero-shot check, relevance analysis,
/// target selection and masking.
pub fn unlearn(model: &Model, probe_set: &LabeledDataset, config: &UnlearnConfig) -> Result<UnlearnOutcome> {
    config.mode.validate()?;
    let neuron_set = analyze(model, probe_set, &config.analysis)?;
    let Perturbation {
        model,
        mask,
        selection,
    } = perturb(model, &neuron_set, config.m_p, config.mode)?;
    Ok(UnlearnOutcome {
        model,
        neuron_set,
        mask,
        selection,
    })
}
