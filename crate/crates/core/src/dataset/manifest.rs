use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DimensionKind, DimensionSpec, XFieldCoord};

use super::DatasetError;

/// One captured image: a path relative to the manifest and its raw coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub path: String,
    pub coord: Vec<f64>,
}

/// Describes an image collection: its axes, images and optional held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub dims: Vec<DimensionSpec>,
    pub images: Vec<ImageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<Vec<usize>>,
}

impl Manifest {
    pub fn n_d(&self) -> usize {
        self.dims.len()
    }

    /// Checks arities, ranges and held-out indices.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.dims.is_empty() {
            return Err(DatasetError::Schema("manifest declares no dims".into()));
        }
        for d in &self.dims {
            if !(d.min.is_finite() && d.max.is_finite()) || d.max < d.min {
                return Err(DatasetError::Schema(format!(
                    "dim `{}` has invalid range [{}, {}]",
                    d.name, d.min, d.max
                )));
            }
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.coord.len() != self.n_d() {
                return Err(DatasetError::CoordinateLength {
                    image: i,
                    expected: self.n_d(),
                    got: img.coord.len(),
                });
            }
            if img.coord.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Schema(format!("image {i} has a non-finite coordinate")));
            }
        }
        if let Some(h) = &self.heldout {
            if let Some(&bad) = h.iter().find(|&&i| i >= self.images.len()) {
                return Err(DatasetError::Schema(format!("heldout index {bad} out of range")));
            }
        }
        Ok(())
    }

    /// Normalized coordinate of image `i`, clamped into `[0, 1]`.
    pub fn coord(&self, i: usize) -> Result<XFieldCoord, DatasetError> {
        let raw = &self.images[i].coord;
        Ok(XFieldCoord::from_raw(raw, &self.dims)?.clamp())
    }

    pub fn coords(&self) -> Result<Vec<XFieldCoord>, DatasetError> {
        (0..self.images.len()).map(|i| self.coord(i)).collect()
    }

    pub fn has_view_dims(&self) -> bool {
        self.dims.iter().any(|d| d.kind.is_view())
    }

    pub fn dims_of_kind(&self, kind: DimensionKind) -> usize {
        self.dims.iter().filter(|d| d.kind == kind).count()
    }

    /// Canonical JSON text (pretty-printed, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Reads and validates a manifest; image paths must exist next to it.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::Io(format!("{}: {e}", path.display())),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Schema(e.to_string()))?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    for img in &manifest.images {
        let p = base.join(&img.path);
        if !p.exists() {
            return Err(DatasetError::MissingFile(p));
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    manifest.validate()?;
    std::fs::write(path, manifest.to_json())
        .map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))
}
