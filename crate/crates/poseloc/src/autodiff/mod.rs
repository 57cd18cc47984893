//! Reverse-mode differentiation over dense tensors.
//!
//! The substrate is deliberately small: a flat [`Tensor`] type generic over
//! [`Real`] (f32 for training speed, f64 for gradient checks), a [`Graph`]
//! that records a linear tape of primitive operations as values are computed,
//! a single backward sweep producing [`Gradients`], and an [`AdamState`]
//! optimizer. Everything downstream (field rendering, pose refinement, the
//! denoiser) is built from the closed primitive set in [`graph`].

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, RawParam};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node id {0} does not belong to this graph")]
    InvalidNode(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}
