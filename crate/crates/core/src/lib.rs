//! Learned view, time and light interpolation of image collections.
//!
//! A small coordinate-conditioned CNN predicts, for every pixel, how that
//! pixel moves as the capture coordinate changes. New images are produced
//! by warping the observed images along those flows and blending them with
//! weights derived from forward/backward flow consistency.

pub mod dataset;
pub mod gradcore;
pub mod metrics;
pub mod model;
pub mod render;
pub mod trainer;

pub use gradcore::{GradError, Graph, NodeId, Real, Tensor};
pub use model::{
    DecoderParams, DimensionKind, DimensionSpec, FlowField, JacobianMap, ModelError, Observation,
    XFieldConfig, XFieldCoord,
};
pub use render::{Model, ModelFile};
pub use trainer::{TrainConfig, Trainer};
