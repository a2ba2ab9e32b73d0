//! Image collections: manifests, PNG I/O, hold-out splits and synthetic
//! scenes with known motion.

mod imageio;
mod manifest;
mod split;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::gradcore::{GradError, Tensor};
use crate::model::{ModelError, Observation};

pub use imageio::{decode_png, encode_png, from_rgb8, load_png, save_png, to_rgb8};
pub use manifest::{load_manifest, save_manifest, ImageEntry, Manifest};
pub use split::{holdout_split, HoldoutProtocol, Split};
pub use synth::{ShadowGeometry, SceneKind, SyntheticScene};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("invalid manifest: {0}")]
    Schema(String),
    #[error("image {image}: coordinate has {got} values, expected {expected}")]
    CoordinateLength { image: usize, expected: usize, got: usize },
    #[error("hold-out protocol: {0}")]
    Protocol(String),
    #[error("synthetic scene: {0}")]
    Synth(String),
    #[error("images differ in size: {0:?} vs {1:?}")]
    MixedSizes(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A manifest together with its decoded images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Loads `manifest.json` (or the given manifest file) and every image.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let manifest = load_manifest(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let images = manifest
            .images
            .iter()
            .map(|e| load_png(&root.join(&e.path)))
            .collect::<Result<Vec<_>, _>>()?;
        for img in &images[1..] {
            if img.shape() != images[0].shape() {
                return Err(DatasetError::MixedSizes(
                    images[0].shape().to_vec(),
                    img.shape().to_vec(),
                ));
            }
        }
        Ok(Self {
            manifest,
            root,
            images,
        })
    }

    /// `(height, width)` of the images.
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1])
    }

    /// Observations for `indices`, with normalized coordinates.
    pub fn observations(&self, indices: &[usize]) -> Result<Vec<Observation>, DatasetError> {
        indices
            .iter()
            .map(|&i| {
                Ok(Observation {
                    coord: self.manifest.coord(i)?,
                    image: self.images[i].clone(),
                })
            })
            .collect()
    }
}
