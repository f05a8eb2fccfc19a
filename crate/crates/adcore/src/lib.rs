// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The primitive set is deliberately small: what an LSTM regressor, its
//! losses and input-gradient analyses need, plus a fused [`Graph::lstm_cell`].
//! [`gradcheck`] compares any graph against central finite differences and
//! [`ParamStore`] carries named parameters with Adam state.

#![forbid(unsafe_code)]

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, BoundParams, Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward needs a 1x1 output, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("gradient keys do not match parameters (at `{name}`)")]
    KeyMismatch { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
