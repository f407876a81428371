//! Selective state-space scanning, scan trajectories and a compressed-image
//! super-resolution network built on a small reverse-mode tensor engine.

pub mod autodiff;
pub mod bench;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod traj;

pub use autodiff::{Gradients, Tape, Var};
pub use model::{MambaCsr, ModelConfig, ModelError, ScanMode};
pub use tensor::{DType, Element, Tensor, TensorError};
