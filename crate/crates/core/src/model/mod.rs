//! Differentiable models written from scratch: dense and convolutional
//! layers, softmax cross-entropy, SGD and evaluation.

mod arch;
pub mod data;
mod network;
mod optim;
mod params;

use thiserror::Error;

pub use arch::{Layer, ModelArch};
pub use data::{Batch, DataError, Dataset, Split};
pub use network::Model;
pub use optim::{sgd_step, Momentum};
pub use params::{Gradient, LayerParams, ParameterSet};

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameters do not match the architecture: {0}")]
    ParamMismatch(String),
    #[error("batch inputs {inputs:?} do not match {labels} labels")]
    BatchShape { inputs: Vec<usize>, labels: usize },
    #[error("input shape {actual:?} does not match the model input {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("training diverged: parameters left the finite f32 range")]
    Diverged,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
