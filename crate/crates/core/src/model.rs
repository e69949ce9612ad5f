//! Layer stacks, forward inference and architecture presets.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{Conv2d, Dense, Layer, LayerKind, MaxPool2d};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMetadata {
    pub name: String,
    pub seed: u64,
    /// Content hashes of every sample the model was trained on.
    pub training_fingerprint: BTreeSet<u64>,
}

/// An ordered stack of layers producing `class_count` logits.
///
/// Models are values: every edit produces a new `Model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    class_count: usize,
    metadata: ModelMetadata,
    output_shapes: Vec<Vec<usize>>,
}

/// Per-layer input and output tensors recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub input: Tensor,
    pub output: Tensor,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Model {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        class_count: usize,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidModel("class count must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        let mut output_shapes = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::InvalidModel(format!(
                    "layer {i} ({}) cannot accept input of shape {shape:?}",
                    layer.kind().name()
                ))
            })?;
            output_shapes.push(shape.clone());
        }
        if shape != [class_count] {
            return Err(Error::InvalidModel(format!(
                "final layer produces shape {shape:?}, expected [{class_count}] logits"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            class_count,
            metadata,
            output_shapes,
        })
    }

    pub fn build(
        arch: &Architecture,
        input_shape: &[usize],
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch.layers(input_shape, class_count, &mut rng)?;
        Self::new(
            input_shape.to_vec(),
            layers,
            class_count,
            ModelMetadata {
                name: arch.to_string(),
                seed,
                training_fingerprint: BTreeSet::new(),
            },
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.layers.get(index).ok_or(Error::LayerIndexOutOfRange {
            index,
            len: self.layers.len(),
        })
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dense(&self, index: usize) -> Result<&Dense> {
        match self.layer(index)? {
            Layer::Dense(d) => Ok(d),
            other => Err(Error::NotDense {
                index,
                kind: other.kind().name(),
            }),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn with_metadata(mut self, metadata: ModelMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// Shape of the tensor produced by layer `index`.
    pub fn output_shape(&self, index: usize) -> &[usize] {
        &self.output_shapes[index]
    }

    /// Shape of the tensor consumed by layer `index`.
    pub fn layer_input_shape(&self, index: usize) -> &[usize] {
        if index == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[index - 1]
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    /// Copy of this model with layer `index` replaced.
    pub fn replace_layer(&self, index: usize, layer: Layer) -> Result<Self> {
        self.layer(index)?;
        let mut layers = self.layers.clone();
        layers[index] = layer;
        Self::new(
            self.input_shape.clone(),
            layers,
            self.class_count,
            self.metadata.clone(),
        )
    }

    /// Index of the last dense layer (the output layer).
    pub fn output_dense_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind() == LayerKind::Dense)
    }

    /// The last dense layer strictly before the output layer: the default
    /// layer for relevance analysis and perturbation.
    pub fn default_analysis_layer(&self) -> Result<usize> {
        let out = self
            .output_dense_index()
            .ok_or_else(|| Error::InvalidModel("model has no dense layer".into()))?;
        self.layers[..out]
            .iter()
            .rposition(|l| l.kind() == LayerKind::Dense)
            .ok_or_else(|| {
                Error::InvalidModel("no dense layer precedes the output layer".into())
            })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = self.layers[0].forward(input);
        for layer in &self.layers[1..] {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    pub fn forward_with_trace(&self, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(input)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let y = layer.forward(&x);
            entries.push(TraceEntry {
                input: x,
                output: y.clone(),
            });
            x = y;
        }
        Ok((x, ActivationTrace { entries }))
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.argmax())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }
}

/// Architecture presets understood by `Model::build` and the CLI `--arch` flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Flatten followed by dense+ReLU blocks of the given widths and a dense
    /// output layer. `mlp-500` is the 784-500-10 network.
    Mlp { hidden: Vec<usize> },
    /// A small all-convolutional feature extractor with a dense head:
    /// conv3x3(8)-relu-pool2-conv3x3(16)-relu-pool2-flatten-dense(128)-relu-dense.
    SmallConv,
}

impl Architecture {
    fn layers(
        &self,
        input_shape: &[usize],
        class_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Layer>> {
        match self {
            Architecture::Mlp { hidden } => {
                let mut layers = vec![Layer::Flatten];
                let mut width: usize = input_shape.iter().product();
                for &h in hidden {
                    layers.push(Layer::Dense(Dense::init(width, h, rng)));
                    layers.push(Layer::Relu);
                    width = h;
                }
                layers.push(Layer::Dense(Dense::init(width, class_count, rng)));
                Ok(layers)
            }
            Architecture::SmallConv => {
                let &[channels, h, w] = input_shape else {
                    return Err(Error::InvalidModel(format!(
                        "conv architecture needs a [C, H, W] input, got {input_shape:?}"
                    )));
                };
                if h < 4 || w < 4 {
                    return Err(Error::InvalidModel("conv input must be at least 4x4".into()));
                }
                let pool = MaxPool2d {
                    window: 2,
                    stride: 2,
                };
                let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
                Ok(vec![
                    Layer::Conv2d(Conv2d::init(channels, 8, 3, 1, 1, rng)),
                    Layer::Relu,
                    Layer::MaxPool2d(pool),
                    Layer::Conv2d(Conv2d::init(8, 16, 3, 1, 1, rng)),
                    Layer::Relu,
                    Layer::MaxPool2d(pool),
                    Layer::Flatten,
                    Layer::Dense(Dense::init(flat, 128, rng)),
                    Layer::Relu,
                    Layer::Dense(Dense::init(128, class_count, rng)),
                ])
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { hidden } => {
                write!(f, "mlp")?;
                for h in hidden {
                    write!(f, "-{h}")?;
                }
                Ok(())
            }
            Architecture::SmallConv => write!(f, "conv"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "conv" {
            return Ok(Architecture::SmallConv);
        }
        let mut parts = s.split('-');
        if parts.next() != Some("mlp") {
            return Err(Error::InvalidArgument(format!(
                "unknown architecture {s:?} (expected mlp-<widths> or conv)"
            )));
        }
        let hidden = parts
            .map(|p| match p.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::InvalidArgument(format!(
                    "bad hidden width {p:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Architecture::Mlp { hidden })
    }
}
