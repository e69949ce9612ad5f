//! Training-free class unlearning for small feedforward and convolutional
//! classifiers.
//!
//! Relevance is propagated from a class logit back through the network,
//! the neurons of one dense layer that most often rank among the top-k for
//! held-out samples of that class are collected, and their incoming weights
//! are masked.

pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod layer;
pub mod lrp;
pub mod model;
pub mod path;
pub mod perturb;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layer::{Conv2d, Dense, Layer, LayerKind, MaxPool2d};
pub use lrp::PropagationRule;
pub use model::{Architecture, Model, ModelMetadata};
pub use tensor::Tensor;
