//! The NPPM model file format.
//!
//! Layout:
//!
//! ```text
//! "NPPM"                      4 bytes magic
//! version                     u32 little-endian (currently 1)
//! header length               u32 little-endian
//! header                      UTF-8 JSON (layer descriptors, shapes, metadata)
//! parameters                  f32 little-endian, per layer: weights then bias
//! ```
//!
//! Parameters are held as `f64` in memory; anything that is not exactly
//! representable as `f32` is rounded on save.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Conv2d, Dense, Layer, MaxPool2d};
use crate::model::{Model, ModelMetadata};

pub const MAGIC: [u8; 4] = *b"NPPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerDescriptor {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerDescriptor {
    fn of(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => LayerDescriptor::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
            },
            Layer::Conv2d(c) => LayerDescriptor::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel_h: c.kernel_h,
                kernel_w: c.kernel_w,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::MaxPool2d(p) => LayerDescriptor::Maxpool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::Relu => LayerDescriptor::Relu,
            Layer::Flatten => LayerDescriptor::Flatten,
        }
    }

    /// Lengths of the parameter blobs this layer owns, in storage order.
    fn blob_lengths(&self) -> Result<Vec<usize>> {
        let overflow = || Error::MalformedHeader("parameter count overflows".into());
        Ok(match *self {
            LayerDescriptor::Dense { inputs, outputs } => {
                vec![inputs.checked_mul(outputs).ok_or_else(overflow)?, outputs]
            }
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                out_channels
                    .checked_mul(in_channels)
                    .and_then(|v| v.checked_mul(kernel_h))
                    .and_then(|v| v.checked_mul(kernel_w))
                    .ok_or_else(overflow)?,
                out_channels,
            ],
            _ => vec![],
        })
    }

    fn build(&self, mut blobs: Vec<Vec<f64>>) -> Result<Layer> {
        let mut next = || blobs.remove(0);
        Ok(match *self {
            LayerDescriptor::Dense { inputs, outputs } => {
                let w = next();
                let b = next();
                Layer::Dense(Dense::new(inputs, outputs, w, b)?)
            }
            LayerDescriptor::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let w = next();
                let b = next();
                Layer::Conv2d(Conv2d::new(
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    w,
                    b,
                )?)
            }
            LayerDescriptor::Maxpool2d { window, stride } => {
                Layer::MaxPool2d(MaxPool2d { window, stride })
            }
            LayerDescriptor::Relu => Layer::Relu,
            LayerDescriptor::Flatten => Layer::Flatten,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    name: String,
    seed: u64,
    class_count: usize,
    input_shape: Vec<usize>,
    layers: Vec<LayerDescriptor>,
    /// Hex-encoded 64-bit sample hashes.
    training_fingerprint: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let meta = model.metadata();
    let header = Header {
        name: meta.name.clone(),
        seed: meta.seed,
        class_count: model.class_count(),
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(LayerDescriptor::of).collect(),
        training_fingerprint: meta
            .training_fingerprint
            .iter()
            .map(|h| format!("{h:016x}"))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::InvalidModel("header exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for layer in model.layers() {
        for blob in layer.parameters() {
            for &v in blob {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload(format!(
            "{} bytes, too short for magic",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let fixed = bytes
        .get(4..12)
        .ok_or_else(|| Error::TruncatedPayload("missing version or header length".into()))?;
    let version = u32::from_le_bytes(fixed[..4].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(fixed[4..].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + header_len).ok_or_else(|| {
        Error::TruncatedPayload(format!(
            "header declares {header_len} bytes, {} available",
            bytes.len() - 12
        ))
    })?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut cursor = 12 + header_len;
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, desc) in header.layers.iter().enumerate() {
        let mut blobs = Vec::new();
        for len in desc.blob_lengths()? {
            let end = len
                .checked_mul(4)
                .and_then(|n| n.checked_add(cursor))
                .ok_or_else(|| Error::MalformedHeader("parameter count overflows".into()))?;
            let raw = bytes.get(cursor..end).ok_or_else(|| {
                Error::TruncatedPayload(format!(
                    "layer {i} needs {len} parameters but the file ends at byte {}",
                    bytes.len()
                ))
            })?;
            blobs.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            );
            cursor = end;
        }
        layers.push(desc.build(blobs)?);
    }
    if cursor != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the declared parameters",
            bytes.len() - cursor
        )));
    }

    let training_fingerprint = header
        .training_fingerprint
        .iter()
        .map(|h| {
            u64::from_str_radix(h, 16)
                .map_err(|_| Error::MalformedHeader(format!("bad fingerprint hash {h:?}")))
        })
        .collect::<Result<_>>()?;
    Model::new(
        header.input_shape,
        layers,
        header.class_count,
        ModelMetadata {
            name: header.name,
            seed: header.seed,
            training_fingerprint,
        },
    )
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
