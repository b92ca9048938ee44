//! Minimal differentiable stack: tensors, layers with analytic backward
//! passes, the dual-transmitter 3-D U-Net, the domain discriminator, Adam
//! and a finite-difference gradient checker.

pub mod cbam;
pub mod discriminator;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod unet;

use thiserror::Error;

pub use layers::{param_checksum, Param, Parameterized};
pub use model::{sample_tensor, DualTxModel, EncoderRole};
pub use optim::{Adam, AdamConfig};
pub use tensor::TensorGrid;
pub use unet::{Arch, Encoded};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
