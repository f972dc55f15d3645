//! Reverse-mode automatic differentiation on flat `f64` tensors.
//!
//! The graph is define-by-run: every op evaluates its forward value
//! immediately when recorded, and `backward` walks the tape in reverse.
//! Parameters live in a [`ParamStore`] keyed by name; a graph binds them
//! as leaves and writes accumulated gradients back after backward.

mod checkpoint;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Graph, ValueId};
pub use store::ParamStore;
pub use tensor::Tensor;

/// Errors surfaced by data-facing APIs (optimizer, checkpoints, finiteness
/// scans). Shape errors during graph construction are programmer errors and
/// panic with the offending op named instead.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite value in node #{index} ({op})")]
    NonFinite { index: usize, op: String },
    #[error("no gradient for registered parameter '{0}'")]
    MissingGradient(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}
