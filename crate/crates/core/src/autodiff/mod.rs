//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Graphs are built eagerly on a [`Tape`]: every operation computes its value
//! immediately and records enough state to run its adjoint later. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse exactly once.
//!
//! Forward values of every reduction (matrix products, normalizations,
//! attention) go through [`kernels`], which the KV-cached inference path in
//! [`crate::model`] also uses. That shared evaluation order is what makes
//! teacher-forced and step-by-step predictions agree bit for bit.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod real;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use optim::{AdamW, AdamWConfig};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("node {node} ({op}): expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node {node} ({op}): {reason}")]
    InvalidArgument {
        node: usize,
        op: &'static str,
        reason: String,
    },
    #[error("backward requires a tape recorded with gradient retention")]
    NotRecording,
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
