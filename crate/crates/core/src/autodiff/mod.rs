//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Parameters live in [`Tensor`]s owned by the layers. A [`Tape`] is created
//! for one forward/backward round: parameters are bound onto it with
//! [`Tape::param`], every primitive appends a node, and [`Tape::backward`]
//! walks the nodes once in reverse. The resulting [`Gradients`] are then
//! accumulated into the parameter tensors and the tape is dropped.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, VectorJacobian};
pub use tensor::{zero_grads, Tensor, TensorId};

use thiserror::Error;

/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: division by exact zero")]
    DivisionByZero { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
}
