//! Core numerics and models for a compact multi-view vision-language
//! training pipeline.

pub mod autograd;
pub mod buffer;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod router;
pub mod seq_model;
pub mod tensor;
pub mod vision;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
