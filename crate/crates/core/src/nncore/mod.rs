//! Small differentiable-computation core: tensors, a reverse-mode tape,
//! dense and 1-D convolution layers, AdamW, gradient checking and
//! checkpoints.

mod adamw;
mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{check_against, grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use layers::{backprop, forward_backward, Layer, LossHead, Objective, Sequential, Supervised};
pub use params::{kaiming_uniform, Parameter, ParameterSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
