//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference gradient checker.
//!
//! Everything in the crate computes on [`Tensor`]. Training instantiates it with
//! `f32`; gradient verification with `f64`.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport, FD_STEP, KINK_MARGIN};
pub use tape::{BnBatchStats, BnMode, BnRunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("zero-norm input to cosine similarity: {0}")]
    ZeroNorm(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
