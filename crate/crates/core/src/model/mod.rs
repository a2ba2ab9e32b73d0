//! The differentiable interpolation pipeline: coordinate → Jacobians →
//! projected flows → warped observations → consistency-weighted blend.

mod coord;
mod decoder;
mod jacobian;
mod params;
mod pipeline;

pub use coord::{DimensionKind, DimensionSpec, XFieldCoord};
pub use decoder::{build_decoder, DecoderParams, JacobianHeads, ParamNodes, XFieldConfig};
pub use jacobian::{disparity_to_jacobian, project_flow, warp, FlowField, JacobianLayout, JacobianMap};
pub use params::ParamSet;
pub use pipeline::{
    build_consistency, build_interpolation, consistency_weights, delight_decompose, interpolate,
    ConsistencyConfig, Observation, SourceNode, SHADING_EPSILON,
};

use thiserror::Error;

use crate::gradcore::GradError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("invalid coordinate {0:?}")]
    InvalidCoordinate(Vec<f64>),
    #[error("unknown dimension kind `{0}`")]
    UnknownDimensionKind(String),
    #[error("no dimensions declared")]
    NoDimensions,
    #[error("view dimension `{0}` has no usable grid range")]
    MissingGridMetadata(String),
    #[error("resolution {height}x{width} with flow factor {flow_factor} is not a square power-of-two multiple of 2")]
    Resolution {
        height: usize,
        width: usize,
        flow_factor: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing parameter tensor `{0}`")]
    MissingTensor(String),
    #[error("no source observations")]
    NoSources,
    #[error("image shape {0:?} does not match the model")]
    ImageShape(Vec<usize>),
    #[error("de-lighting is not enabled for this model")]
    DelightDisabled,
}
