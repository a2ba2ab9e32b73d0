//! Binary model container.
//!
//! Layout: `b"XFLD"`, `u32` format version, `u32` header length, UTF-8 JSON
//! header, then tensors until end of file, each as `u32` name length, name
//! bytes, `u32` rank, `u32` extents and little-endian `f32` data.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gradcore::Tensor;
use crate::model::{DecoderParams, DimensionSpec, Observation, ParamSet, XFieldConfig, XFieldCoord};
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: [u8; 4] = *b"XFLD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),
    #[error("tensor `{0}` listed in the header is missing")]
    MissingTensor(String),
    #[error("tensor `{0}` is not listed in the header")]
    UnlistedTensor(String),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid tensor `{name}`: {message}")]
    Tensor { name: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub delight: bool,
    pub flow_factor: usize,
}

/// An observation stored in the file: its coordinate and image tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub coord: Vec<f64>,
    pub tensor: String,
}

/// Optimizer state of an unfinished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub steps_completed: usize,
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub name: String,
    pub n_d: usize,
    pub dims: Vec<DimensionSpec>,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub channel_schedule: Vec<usize>,
    pub flags: ModelFlags,
    pub config: XFieldConfig,
    /// Every tensor in the file, in file order.
    pub tensors: Vec<String>,
    pub observations: Vec<ObservationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
}

/// A parsed model file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FileError> {
        if self.bytes.len() < n {
            return Err(FileError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

impl ModelFile {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        push_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        for (name, t) in &self.tensors {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.shape().len());
            for &e in t.shape() {
                push_u32(&mut out, e);
            }
            out.reserve(4 * t.len());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FileError> {
        let mut r = Reader { bytes };
        if r.bytes.len() < 4 {
            return Err(if MAGIC.starts_with(r.bytes) {
                FileError::Truncated
            } else {
                FileError::BadMagic
            });
        }
        if r.take(4)? != MAGIC {
            return Err(FileError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FileError::UnsupportedVersion(version));
        }
        let len = r.u32()? as usize;
        let header: ModelHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| FileError::Header(e.to_string()))?;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        while !r.bytes.is_empty() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|e| FileError::Header(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .and_then(|c| c.checked_mul(4))
                .ok_or(FileError::Truncated)?;
            let data = r
                .take(count)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if !seen.insert(name.clone()) {
                return Err(FileError::DuplicateTensor(name));
            }
            let t = Tensor::new(shape, data).map_err(|e| FileError::Tensor {
                name: name.clone(),
                message: e.to_string(),
            })?;
            tensors.push((name, t));
        }
        for (name, _) in &tensors {
            if !header.tensors.contains(name) {
                return Err(FileError::UnlistedTensor(name.clone()));
            }
        }
        for name in &header.tensors {
            if !seen.contains(name) {
                return Err(FileError::MissingTensor(name.clone()));
            }
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), FileError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FileError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        let bytes = std::fs::read(path).map_err(|e| FileError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Packs parameters, observations and optional training state.
    pub fn build(
        name: &str,
        params: &DecoderParams<f32>,
        observations: &[Observation],
        training: Option<TrainingMeta>,
        moments: Option<(&ParamSet<f32>, &ParamSet<f32>)>,
    ) -> Self {
        let config = &params.config;
        let mut tensors: Vec<(String, Tensor<f32>)> = params
            .tensors
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut entries = Vec::with_capacity(observations.len());
        for (i, o) in observations.iter().enumerate() {
            let name = format!("obs.{i}");
            entries.push(ObservationEntry {
                coord: o.coord.values().to_vec(),
                tensor: name.clone(),
            });
            tensors.push((name, o.image.clone()));
        }
        if let Some((m, v)) = moments {
            for (prefix, set) in [("adam.m.", m), ("adam.v.", v)] {
                tensors.extend(set.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
            }
        }
        Self {
            header: ModelHeader {
                name: name.to_string(),
                n_d: config.n_d(),
                dims: config.dims.clone(),
                resolution: [config.height, config.width],
                channel_schedule: config.channel_schedule(),
                flags: ModelFlags {
                    delight: config.delight,
                    flow_factor: config.flow_factor,
                },
                config: config.clone(),
                tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
                observations: entries,
                training,
            },
            tensors,
        }
    }

    /// Decoder parameters (every tensor that is neither an observation nor
    /// optimizer state).
    pub fn params(&self) -> Result<DecoderParams<f32>, FileError> {
        let config = self.header.config.clone();
        config.validate().map_err(|e| FileError::Header(e.to_string()))?;
        if config.dims != self.header.dims || [config.height, config.width] != self.header.resolution {
            return Err(FileError::Header("config disagrees with dims/resolution".into()));
        }
        let obs: HashSet<&str> = self.header.observations.iter().map(|o| o.tensor.as_str()).collect();
        let mut tensors = ParamSet::new();
        for (n, t) in &self.tensors {
            if !obs.contains(n.as_str()) && !n.starts_with("adam.") {
                tensors.insert(n.clone(), t.clone());
            }
        }
        let expected = DecoderParams::<f32>::init(config.clone(), self.header.observations.len(), 0)
            .map_err(|e| FileError::Header(e.to_string()))?;
        for (n, t) in expected.tensors.iter() {
            match tensors.get(n) {
                None => return Err(FileError::MissingTensor(n.to_string())),
                Some(have) if have.shape() != t.shape() => {
                    return Err(FileError::Tensor {
                        name: n.to_string(),
                        message: format!("shape {:?}, expected {:?}", have.shape(), t.shape()),
                    })
                }
                _ => {}
            }
        }
        if tensors.len() != expected.tensors.len() {
            let extra = tensors
                .names()
                .into_iter()
                .find(|n| expected.tensors.get(n).is_none())
                .unwrap_or_default();
            return Err(FileError::UnlistedTensor(extra));
        }
        Ok(DecoderParams { config, tensors })
    }

    pub fn observations(&self) -> Result<Vec<Observation>, FileError> {
        self.header
            .observations
            .iter()
            .map(|o| {
                let image = self
                    .get(&o.tensor)
                    .ok_or_else(|| FileError::MissingTensor(o.tensor.clone()))?
                    .clone();
                let coord = XFieldCoord::new(o.coord.clone()).map_err(|e| FileError::Header(e.to_string()))?;
                Ok(Observation { coord, image })
            })
            .collect()
    }

    /// Resumable state, if the file was written as a checkpoint.
    pub fn checkpoint(&self) -> Result<Option<Checkpoint>, FileError> {
        let Some(meta) = self.header.training.as_ref().and_then(|t| t.checkpoint.as_ref()) else {
            return Ok(None);
        };
        let params = self.params()?;
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for name in params.tensors.names() {
            for (prefix, set) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let t = self.get(&key).ok_or(FileError::MissingTensor(key))?;
                set.insert(name.clone(), t.clone());
            }
        }
        Ok(Some(Checkpoint {
            params,
            step: meta.step,
            m,
            v,
            losses: meta.losses.clone(),
        }))
    }
}

/// Writes a resumable checkpoint of a training run.
pub fn checkpoint_file(
    name: &str,
    checkpoint: &Checkpoint,
    observations: &[Observation],
    config: &TrainConfig,
) -> ModelFile {
    let training = TrainingMeta {
        config: config.clone(),
        steps_completed: checkpoint.step,
        final_loss: checkpoint.losses.last().copied(),
        checkpoint: Some(CheckpointMeta {
            step: checkpoint.step,
            losses: checkpoint.losses.clone(),
        }),
    };
    ModelFile::build(
        name,
        &checkpoint.params,
        observations,
        Some(training),
        Some((&checkpoint.m, &checkpoint.v)),
    )
}
