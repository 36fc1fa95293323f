pub mod channel;
pub mod codec;
pub mod enclave;
pub mod federation;
pub mod model;
pub mod pruning;
pub mod report;
pub mod tensor;

pub use model::{Batch, Dataset, Gradient, Model, ModelArch, ParameterSet};
pub use tensor::Tensor;
