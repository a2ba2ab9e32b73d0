//! Trained models: persistence and rendering at arbitrary coordinates.

mod file;

use std::path::Path;

use crate::gradcore::{Graph, Tensor};
use crate::model::{interpolate, DecoderParams, DimensionSpec, ModelError, Observation, XFieldCoord};

pub use file::{
    checkpoint_file, CheckpointMeta, FileError, ModelFile, ModelFlags, ModelHeader, ObservationEntry,
    TrainingMeta, FORMAT_VERSION, MAGIC,
};

/// Above this many observations rendering uses only the nearest few.
pub const MAX_ALL_SOURCES: usize = 9;
const NEAREST_SOURCES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("coordinate has {got} values, model has {expected} dimensions")]
    Arity { expected: usize, got: usize },
    #[error("coordinate value {0} is not finite")]
    NonFinite(f64),
    #[error("axis {axis} out of range for {n_d} dimensions")]
    InvalidAxis { axis: usize, n_d: usize },
    #[error("invalid render parameter: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A trained X-Field ready to render.
#[derive(Clone, Debug)]
pub struct Model {
    pub name: String,
    pub params: DecoderParams<f32>,
    pub observations: Vec<Observation>,
    pub training: Option<TrainingMeta>,
}

impl Model {
    pub fn from_file(file: &ModelFile) -> Result<Self, RenderError> {
        let observations = file.observations()?;
        if observations.is_empty() {
            return Err(ModelError::NoSources.into());
        }
        Ok(Self {
            name: file.header.name.clone(),
            params: file.params()?,
            observations,
            training: file.header.training.clone(),
        })
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile::build(&self.name, &self.params, &self.observations, self.training.clone(), None)
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        Self::from_file(&ModelFile::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        Ok(self.to_file().save(path)?)
    }

    pub fn dims(&self) -> &[DimensionSpec] {
        &self.params.config.dims
    }

    pub fn n_d(&self) -> usize {
        self.params.config.n_d()
    }

    /// `(height, width)` of the trained decoder.
    pub fn resolution(&self) -> (usize, usize) {
        (self.params.config.height, self.params.config.width)
    }

    /// Validates and clamps a normalized coordinate.
    pub fn coord(&self, values: &[f64]) -> Result<XFieldCoord, RenderError> {
        if values.len() != self.n_d() {
            return Err(RenderError::Arity {
                expected: self.n_d(),
                got: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(RenderError::NonFinite(bad));
        }
        Ok(XFieldCoord::clamped(values)?)
    }

    /// Every observation for small collections, otherwise the nearest few
    /// (an observation at `x` itself included).
    pub fn sources_for(&self, x: &XFieldCoord) -> Vec<usize> {
        let n = self.observations.len();
        if n <= MAX_ALL_SOURCES {
            return (0..n).collect();
        }
        let mut order: Vec<(f64, usize)> = self
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| (o.coord.distance_sq(x), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = order.into_iter().take(NEAREST_SOURCES).map(|(_, i)| i).collect();
        chosen.sort_unstable();
        chosen
    }

    /// Renders at the trained resolution.
    pub fn render(&self, coord: &[f64]) -> Result<Tensor<f32>, RenderError> {
        let x = self.coord(coord)?;
        Ok(interpolate(&self.params, &self.observations, &self.sources_for(&x), &x)?)
    }

    /// Renders and bilinearly resamples to `width×height` when that differs
    /// from the trained resolution.
    pub fn render_frame(&self, coord: &[f64], width: usize, height: usize) -> Result<Tensor<f32>, RenderError> {
        if width == 0 || height == 0 {
            return Err(RenderError::InvalidArgument(format!("size {width}x{height}")));
        }
        let img = self.render(coord)?;
        resample(img, height, width)
    }

    /// Pixelwise mean of `samples` renders spread uniformly over
    /// `[center − radius, center + radius]` along `axis`.
    pub fn render_effect(
        &self,
        center: &[f64],
        axis: usize,
        radius: f64,
        samples: usize,
        width: usize,
        height: usize,
    ) -> Result<Tensor<f32>, RenderError> {
        let coords = self.effect_coords(center, axis, radius, samples)?;
        if radius == 0.0 {
            // Every sample is the same render.
            return self.render_frame(center, width, height);
        }
        let mut sum: Option<Tensor<f32>> = None;
        for c in &coords {
            let frame = self.render_frame(c, width, height)?;
            sum = Some(match sum {
                None => frame,
                Some(mut acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(frame.data()) {
                        *a += b;
                    }
                    acc
                }
            });
        }
        let n = coords.len() as f32;
        Ok(sum.unwrap().map(|v| v / n))
    }

    /// Coordinates sampled by [`Model::render_effect`], before clamping.
    pub fn effect_coords(
        &self,
        center: &[f64],
        axis: usize,
        radius: f64,
        samples: usize,
    ) -> Result<Vec<Vec<f64>>, RenderError> {
        self.coord(center)?;
        if axis >= self.n_d() {
            return Err(RenderError::InvalidAxis { axis, n_d: self.n_d() });
        }
        if samples == 0 {
            return Err(RenderError::InvalidArgument("samples must be at least 1".into()));
        }
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(RenderError::InvalidArgument(format!("radius {radius}")));
        }
        Ok((0..samples)
            .map(|i| {
                let t = if samples == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (samples - 1) as f64
                };
                let mut c = center.to_vec();
                c[axis] += t * radius;
                c
            })
            .collect())
    }
}

/// Bilinear half-pixel resampling; the identity when the size matches.
pub fn resample(img: Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>, RenderError> {
    let (h, w, _) = img.hwc().map_err(ModelError::from)?;
    if (h, w) == (height, width) {
        return Ok(img);
    }
    let mut g = Graph::new();
    let i = g.constant("image", img);
    let out = g.resize(i, height, width).map_err(ModelError::from)?;
    g.forward().map_err(ModelError::from)?;
    Ok(g.value(out).unwrap().clone())
}
