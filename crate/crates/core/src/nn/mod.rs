//! Trainable layers and the Adam optimizer.

mod adam;
mod batchnorm;
pub mod checkpoint;
mod embedding;
mod gru;
mod linear;

pub use adam::AdamState;
pub use batchnorm::BatchNormLayer;
pub use checkpoint::Checkpoint;
pub use embedding::EmbeddingTable;
pub use gru::GruCell;
pub use linear::LinearLayer;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};

/// Whether a forward pass trains (batch statistics, sampling) or evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("symbol {symbol} outside vocabulary of size {vocab}")]
    SymbolOutOfRange { symbol: usize, vocab: usize },
    #[error("parameter #{0} has no gradient")]
    MissingGradient(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tensor with entries uniform in `[-bound, bound)`.
pub fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("uniform_tensor: consistent shape")
}
