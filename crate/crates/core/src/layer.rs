//! Layer definitions and their forward kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    MaxPool2d,
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// Fully connected layer. `weights` is `outputs x inputs`, row-major, so row
/// `j` holds the incoming weights of output neuron `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidModel("dense layer with zero width".into()));
        }
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::InvalidModel(format!(
                "dense {inputs}->{outputs}: got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite dense parameter".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// He-uniform initialization, zero bias. Values are rounded to `f32`
    /// precision so they survive the model file format unchanged.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| round_f32(rng.random_range(-limit..limit)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|j| dot(self.row(j), input) + self.bias[j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels x in_channels x kernel_h x kernel_w`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
            return Err(Error::InvalidModel("conv2d with a zero dimension".into()));
        }
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w
            || bias.len() != out_channels
        {
            return Err(Error::InvalidModel(format!(
                "conv2d {in_channels}->{out_channels} {kernel_h}x{kernel_w}: got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite conv2d parameter".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let limit = (6.0 / fan_in as f64).sqrt();
        let weights = (0..out_channels * fan_in)
            .map(|_| round_f32(rng.random_range(-limit..limit)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    #[inline]
    pub(crate) fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx
    }

    /// Calls `f(ic, ky, kx, input_offset)` for every in-bounds tap of the
    /// receptive field of output pixel `(oy, ox)`.
    #[inline]
    pub(crate) fn for_each_tap(
        &self,
        in_h: usize,
        in_w: usize,
        oy: usize,
        ox: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        for ic in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for kx in 0..self.kernel_w {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    f(ic, ky, kx, (ic * in_h + iy as usize) * in_w + ix as usize);
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], in_h: usize, in_w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = self
            .output_hw(in_h, in_w)
            .expect("conv2d shape validated by model");
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for oc in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    self.for_each_tap(in_h, in_w, oy, ox, |ic, ky, kx, at| {
                        acc += self.weights[self.weight_index(oc, ic, ky, kx)] * input[at];
                    });
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || h < self.window || w < self.window {
            return None;
        }
        Some((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }

    /// Flat input offset of the winning element for every output position.
    /// Ties resolve to the first element in row-major window order.
    pub fn argmax_offsets(&self, input: &[f64], channels: usize, h: usize, w: usize) -> Vec<usize> {
        let (oh, ow) = self.output_hw(h, w).expect("maxpool shape validated by model");
        let mut winners = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (c * h + oy * self.stride) * w + ox * self.stride;
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let at = (c * h + oy * self.stride + dy) * w + ox * self.stride + dx;
                            if input[at] > input[best] {
                                best = at;
                            }
                        }
                    }
                    winners.push(best);
                }
            }
        }
        winners
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool2d(_) => LayerKind::MaxPool2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    /// Output shape for a given input shape, or `None` if the layer cannot
    /// accept it.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => (input == [d.inputs]).then(|| vec![d.outputs]),
            Layer::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.in_channels => {
                    let (oh, ow) = c.output_hw(h, w)?;
                    Some(vec![c.out_channels, oh, ow])
                }
                _ => None,
            },
            Layer::MaxPool2d(p) => match *input {
                [ch, h, w] => {
                    let (oh, ow) = p.output_hw(h, w)?;
                    Some(vec![ch, oh, ow])
                }
                _ => None,
            },
            Layer::Relu => Some(input.to_vec()),
            Layer::Flatten => Some(vec![input.iter().product()]),
        }
    }

    /// Forward pass on an input whose shape has already been validated.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => Tensor::from_parts(vec![d.outputs], d.forward(input.data())),
            Layer::Conv2d(c) => {
                let s = input.shape();
                let (out, oh, ow) = c.forward(input.data(), s[1], s[2]);
                Tensor::from_parts(vec![c.out_channels, oh, ow], out)
            }
            Layer::MaxPool2d(p) => {
                let s = input.shape();
                let (oh, ow) = p.output_hw(s[1], s[2]).expect("validated");
                let data = p
                    .argmax_offsets(input.data(), s[0], s[1], s[2])
                    .into_iter()
                    .map(|at| input.data()[at])
                    .collect();
                Tensor::from_parts(vec![s[0], oh, ow], data)
            }
            Layer::Relu => Tensor::from_parts(
                input.shape().to_vec(),
                input.data().iter().map(|&v| v.max(0.0)).collect(),
            ),
            Layer::Flatten => Tensor::from_parts(vec![input.len()], input.data().to_vec()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            Layer::Conv2d(c) => c.weights.len() + c.bias.len(),
            _ => 0,
        }
    }

    /// Parameter slices in storage order (weights, then bias).
    pub fn parameters(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::Conv2d(c) => vec![&c.weights, &c.bias],
            _ => vec![],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weights, &mut c.bias],
            _ => vec![],
        }
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
