//! Trainable desk-scale models and architecture descriptors.

mod blob;
mod descriptor;
mod model;
mod tensor;

pub use blob::{CipherTensor, Payload, DTYPE_PAILLIER, DTYPE_PLAIN_F64, MAGIC, VERSION};
pub use descriptor::{Activation, ArchitectureDescriptor, Family, Layer, Shape};
pub use model::{
    Hyperparams, ModelKind, TrainableModel, CNN_FILTERS, CNN_KERNEL, MLP_HIDDEN,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("input dimension {input_dim} is not valid for {kind}")]
    InvalidInputDim { kind: ModelKind, input_dim: usize },
    #[error("learning rate must be finite and non-negative, batch size positive")]
    InvalidHyperparams,
    #[error("parameter tensors do not match the model layout")]
    ParameterLayout,
    #[error("non-finite value")]
    NonFinite,
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown model kind {0:?}")]
    UnknownModel(String),
    #[error("unknown architecture family {0:?}")]
    UnknownFamily(String),
    #[error("malformed weight blob: {0}")]
    Blob(String),
}
