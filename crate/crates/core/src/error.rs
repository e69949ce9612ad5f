use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer index {index} out of range (model has {len} layers)")]
    LayerIndexOutOfRange { index: usize, len: usize },

    #[error("layer {index} is a {kind} layer, expected dense")]
    NotDense { index: usize, kind: &'static str },

    #[error("class {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("neuron set bound violated: z = {z}, expected {k} <= z <= {width}")]
    NeuronSetBound { z: usize, k: usize, width: usize },

    #[error("zero-shot violation: {overlap} probe sample(s) appear in the model's training fingerprint")]
    ZeroShotViolation { overlap: usize },

    #[error("insufficient samples of class {class}: requested {requested}, available {available}")]
    InsufficientSamples {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("model file: bad magic bytes {found:02x?}")]
    BadMagic { found: [u8; 4] },

    #[error("model file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("model file: truncated payload ({0})")]
    TruncatedPayload(String),

    #[error("model file: malformed header: {0}")]
    MalformedHeader(String),

    #[error("idx file {path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    IdxBadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("idx files disagree on sample count: {images} images, {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("idx file {path}: truncated (expected {expected} bytes, found {found})")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
