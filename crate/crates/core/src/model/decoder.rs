use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{Graph, NodeId, Real, Tensor};

use super::coord::{DimensionSpec, XFieldCoord};
use super::jacobian::{JacobianLayout, JacobianMap};
use super::params::ParamSet;
use super::ModelError;

/// Architecture and pipeline settings of one trained scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XFieldConfig {
    pub dims: Vec<DimensionSpec>,
    pub height: usize,
    pub width: usize,
    /// Flow is decoded at `height / flow_factor` and upsampled (1, 2 or 4).
    pub flow_factor: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    pub slope: f64,
    /// Consistency bandwidth.
    pub sigma: f64,
    pub delight: bool,
}

impl XFieldConfig {
    pub fn new(dims: Vec<DimensionSpec>, height: usize, width: usize) -> Self {
        Self {
            dims,
            height,
            width,
            flow_factor: 1,
            base_channels: 128,
            min_channels: 16,
            slope: 0.2,
            sigma: 10.0,
            delight: false,
        }
    }

    pub fn n_d(&self) -> usize {
        self.dims.len()
    }

    pub fn flow_size(&self) -> usize {
        self.height / self.flow_factor.max(1)
    }

    pub fn layout(&self) -> Result<JacobianLayout, ModelError> {
        JacobianLayout::new(&self.dims)
    }

    /// Number of `upsample → conv → leaky_relu` stages from the 2×2 seed.
    pub fn stage_count(&self) -> usize {
        self.flow_size().trailing_zeros() as usize - 1
    }

    /// Output channels of each stage.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (1..=self.stage_count())
            .map(|s| (self.base_channels >> s).max(self.min_channels))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.layout()?;
        if ![1, 2, 4].contains(&self.flow_factor) {
            return Err(ModelError::Config(format!(
                "flow factor {} not in {{1, 2, 4}}",
                self.flow_factor
            )));
        }
        let f = self.flow_size();
        if self.height != self.width
            || self.height % self.flow_factor != 0
            || f < 2
            || !f.is_power_of_two()
        {
            return Err(ModelError::Resolution {
                height: self.height,
                width: self.width,
                flow_factor: self.flow_factor,
            });
        }
        if self.base_channels == 0 || self.min_channels == 0 || self.min_channels > self.base_channels {
            return Err(ModelError::Config(format!(
                "channel range {}..{} invalid",
                self.min_channels, self.base_channels
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(ModelError::Config(format!("slope {} outside (0, 1)", self.slope)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ModelError::Config(format!("sigma {} must be > 0", self.sigma)));
        }
        Ok(())
    }
}

/// All trainable state: decoder weights plus, with de-lighting, one
/// log-shading image per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T = f32> {
    pub config: XFieldConfig,
    pub tensors: ParamSet<T>,
}

/// Multiplier on the He bound of the coordinate embedding weights.
pub const COORD_WEIGHT_SCALE: f64 = 0.1;

pub(crate) fn shading_name(i: usize) -> String {
    format!("shading.{i}")
}

impl<T: Real> DecoderParams<T> {
    /// He-uniform initialization with a zeroed output head, so the initial
    /// Jacobian is exactly zero everywhere.
    pub fn init(config: XFieldConfig, observations: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        };
        let n_d = config.n_d();
        let base = config.base_channels;
        let mut tensors = ParamSet::new();
        // The coordinate enters weakly and the bias carries a shared
        // component, so early updates move the flow of every coordinate
        // together and the decoder interpolates between trained coordinates
        // instead of fitting each one separately.
        let scale = T::from_f64_lossy(COORD_WEIGHT_SCALE);
        tensors.insert("fc.weight", uniform(vec![n_d, 4 * base], n_d).map(|v| v * scale));
        tensors.insert("fc.bias", uniform(vec![4 * base], n_d));
        let mut cin = base + n_d + 2;
        for (s, &cout) in config.channel_schedule().iter().enumerate() {
            tensors.insert(format!("stage{s}.kernel"), uniform(vec![3, 3, cin, cout], 9 * cin));
            tensors.insert(format!("stage{s}.bias"), Tensor::zeros([cout]));
            cin = cout;
        }
        let raw = config.layout()?.raw_channels();
        tensors.insert("head.kernel", Tensor::zeros([3, 3, cin, raw]));
        tensors.insert("head.bias", Tensor::zeros([raw]));
        if config.delight {
            tensors.insert("shading_head.kernel", Tensor::zeros([3, 3, cin, raw]));
            tensors.insert("shading_head.bias", Tensor::zeros([raw]));
            for i in 0..observations {
                tensors.insert(shading_name(i), Tensor::zeros([config.height, config.width, 3]));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.scalar_count()
    }

    /// Parameter count excluding the per-observation shading images.
    pub fn network_param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("shading."))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        DecoderParams {
            config: self.config.clone(),
            tensors: self.tensors.cast(),
        }
    }

    /// Adds every tensor as a leaf of `g` (trainable or constant).
    pub fn add_to_graph(&self, g: &mut Graph<T>, trainable: bool) -> Result<ParamNodes, ModelError> {
        let mut ids = HashMap::new();
        for (name, t) in self.tensors.iter() {
            let id = if trainable {
                let id = g.parameter(name, t.shape().to_vec())?;
                g.bind(id, t.clone())?;
                id
            } else {
                g.constant(name, t.clone())
            };
            ids.insert(name.to_string(), id);
        }
        Ok(ParamNodes { ids })
    }

    /// Decodes the Jacobian at `x`, at flow resolution. With de-lighting
    /// the second element is the shading Jacobian.
    pub fn decode_jacobian(
        &self,
        x: &XFieldCoord,
    ) -> Result<(JacobianMap<T>, Option<JacobianMap<T>>), ModelError> {
        let mut g = Graph::new();
        let nodes = self.add_to_graph(&mut g, false)?;
        let heads = build_decoder(&mut g, &self.config, &nodes, x.values(), false)?;
        g.forward()?;
        let n_d = self.config.n_d();
        let albedo = JacobianMap::from_tensor(g.value(heads.albedo).unwrap().clone(), n_d)?;
        let shading = heads
            .shading
            .map(|s| JacobianMap::from_tensor(g.value(s).unwrap().clone(), n_d))
            .transpose()?;
        Ok((albedo, shading))
    }
}

/// Graph leaves of a [`DecoderParams`], by tensor name.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    ids: HashMap<String, NodeId>,
}

impl ParamNodes {
    /// Wraps existing graph leaves, e.g. ones created by a gradient check.
    pub fn new(ids: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId, ModelError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }
}

/// Jacobian nodes produced by one decoder evaluation.
#[derive(Clone, Copy, Debug)]
pub struct JacobianHeads {
    pub albedo: NodeId,
    pub shading: Option<NodeId>,
}

/// Appends the decoder for coordinate `x` to `g`. With `full_resolution`
/// the Jacobians are upsampled to the image size.
pub fn build_decoder<T: Real>(
    g: &mut Graph<T>,
    config: &XFieldConfig,
    nodes: &ParamNodes,
    x: &[f64],
    full_resolution: bool,
) -> Result<JacobianHeads, ModelError> {
    let n_d = config.n_d();
    if x.len() != n_d {
        return Err(ModelError::Arity {
            expected: n_d,
            got: x.len(),
        });
    }
    let base = config.base_channels;
    let xin = g.constant(
        "coord",
        Tensor::new([n_d], x.iter().map(|&v| T::from_f64_lossy(v)).collect())?,
    );
    let fc = g.linear(xin, nodes.get("fc.weight")?, nodes.get("fc.bias")?)?;
    let fc = g.leaky_relu(fc, config.slope)?;
    let seed = g.reshape(fc, [2, 2, base])?;
    let xmap = g.broadcast_pixels(xin, 2, 2)?;
    let grid = g.constant(
        "coord.grid",
        Tensor::from_fn([2, 2, 2], |i| {
            let (p, c) = (i / 2, i % 2);
            let v = if c == 0 { p % 2 } else { p / 2 };
            T::from_f64_lossy((v as f64 + 0.5) / 2.0)
        }),
    );
    let mut h = g.concat(seed, xmap)?;
    h = g.concat(h, grid)?;
    for s in 0..config.stage_count() {
        h = g.upsample2x(h)?;
        h = g.conv2d(
            h,
            nodes.get(&format!("stage{s}.kernel"))?,
            nodes.get(&format!("stage{s}.bias"))?,
        )?;
        h = g.leaky_relu(h, config.slope)?;
    }
    let layout = config.layout()?;
    let head = |g: &mut Graph<T>, prefix: &str| -> Result<NodeId, ModelError> {
        let raw = g.conv2d(
            h,
            nodes.get(&format!("{prefix}.kernel"))?,
            nodes.get(&format!("{prefix}.bias"))?,
        )?;
        let mut j = layout.build(g, raw)?;
        if full_resolution && config.flow_factor > 1 {
            j = g.resize(j, config.height, config.width)?;
        }
        Ok(j)
    };
    let albedo = head(g, "head")?;
    let shading = if config.delight {
        Some(head(g, "shading_head")?)
    } else {
        None
    };
    Ok(JacobianHeads { albedo, shading })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DimensionKind;

    fn config(n_d: usize, size: usize) -> XFieldConfig {
        let dims = (0..n_d)
            .map(|i| DimensionSpec::new(format!("t{i}"), DimensionKind::Time, 0.0, 1.0))
            .collect();
        XFieldConfig::new(dims, size, size)
    }

    #[test]
    fn fresh_decoder_outputs_zero_jacobian() {
        let p = DecoderParams::<f32>::init(config(3, 16), 0, 1).unwrap();
        for x in [[0.0, 0.5, 1.0], [0.3, 0.9, 0.1]] {
            let (j, shading) = p.decode_jacobian(&XFieldCoord::new(x.to_vec()).unwrap()).unwrap();
            assert!(shading.is_none());
            assert_eq!(j.shape(), [16, 16, 2, 3]);
            assert!(j.tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shape_at_64() {
        let mut c = config(3, 64);
        c.base_channels = 16;
        c.min_channels = 4;
        let p = DecoderParams::<f32>::init(c, 0, 1).unwrap();
        let (j, _) = p.decode_jacobian(&XFieldCoord::new(vec![0.2, 0.4, 0.6]).unwrap()).unwrap();
        assert_eq!(j.shape(), [64, 64, 2, 3]);
    }

    #[test]
    fn channel_schedule_halves_to_floor() {
        let c = config(1, 64);
        assert_eq!(c.stage_count(), 5);
        assert_eq!(c.channel_schedule(), vec![64, 32, 16, 16, 16]);
        let p = DecoderParams::<f32>::init(c, 0, 0).unwrap();
        assert!(p.param_count() > 90_000);
    }

    #[test]
    fn resolution_rules() {
        let mut c = config(1, 48);
        assert!(matches!(c.validate(), Err(ModelError::Resolution { .. })));
        c.height = 64;
        assert!(matches!(c.validate(), Err(ModelError::Resolution { .. })));
        c.width = 64;
        c.flow_factor = 4;
        assert!(c.validate().is_ok());
        assert_eq!(c.stage_count(), 3);
        c.flow_factor = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn delight_adds_heads_and_shading() {
        let mut c = config(1, 8);
        c.delight = true;
        let p = DecoderParams::<f32>::init(c, 3, 0).unwrap();
        assert!(p.tensors.get("shading_head.kernel").is_some());
        assert_eq!(p.tensors.get("shading.2").unwrap().shape(), &[8, 8, 3]);
        let (_, s) = p.decode_jacobian(&XFieldCoord::new(vec![0.5]).unwrap()).unwrap();
        assert!(s.is_some());
    }
}
