//! Minimal reverse-mode differentiation over dense real arrays.
//!
//! A [`Graph`] records exactly the operations the interpolation pipeline
//! needs (elementwise arithmetic, convolution, bilinear resampling and
//! sampling, flow projection) and differentiates a scalar output with
//! respect to its trainable leaves. Evaluation is single-threaded and
//! bitwise deterministic.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("output must be scalar, has shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {node} ({op}) is evaluated at a non-differentiable point")]
    NonDifferentiable { node: usize, op: &'static str },
}
