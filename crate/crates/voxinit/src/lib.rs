//! Self-supervised weight initialization for hybrid volumetric segmentation
//! models: a tape-based autodiff core, a data-independent initializer zoo,
//! the shuffle/mask input transformation, a transformer-encoder +
//! conv-decoder model, the pretraining/fine-tuning objectives, and the
//! two-step training pipeline.

pub mod audit;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod init;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod transform;

pub use error::{Result, VoxError};
pub use scalar::Scalar;
pub use tensor::optim::{AdamWParams, OptimizerState, SgdParams};
pub use tensor::tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

/// Training-mode tensors (f32 storage).
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-mode tensors (f64 storage).
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
