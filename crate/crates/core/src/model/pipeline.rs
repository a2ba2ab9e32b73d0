//! Warp-and-blend interpolation: flows from the decoded Jacobians, warped
//! observations, consistency weights and the optional shading/albedo split.

use crate::gradcore::{Graph, NodeId, Real, Tensor};

use super::coord::XFieldCoord;
use super::decoder::{build_decoder, shading_name, DecoderParams, JacobianHeads, ParamNodes, XFieldConfig};
use super::jacobian::JacobianMap;
use super::ModelError;

/// Guards the albedo division.
pub const SHADING_EPSILON: f64 = 1e-8;

/// A captured image and its normalized coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T = f32> {
    pub coord: XFieldCoord,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor<T>,
}

/// Bandwidth of the consistency weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub sigma: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { sigma: 10.0 }
    }
}

/// One warp source inside a graph.
#[derive(Clone, Debug)]
pub struct SourceNode {
    pub coord: Vec<f64>,
    /// Observed image leaf, `H×W×3`.
    pub image: NodeId,
    /// Log-shading leaf when de-lighting.
    pub log_shading: Option<NodeId>,
}

/// Source positions `q` for every pixel of the image at `x` when reading
/// from the image at `y`: `q = p + J(x)·(y − x)`.
fn forward_flow<T: Real>(g: &mut Graph<T>, jx: NodeId, x: &[f64], y: &[f64]) -> Result<NodeId, ModelError> {
    let delta: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    Ok(g.project_flow(jx, &delta)?)
}

/// Appends normalized consistency weights (`H×W×1` each, summing to one per
/// pixel) for warping every source to `x`. `forward[i]` are the read
/// positions for source `i`, `source_jacobians[i]` its Jacobian.
pub fn build_consistency<T: Real>(
    g: &mut Graph<T>,
    x: &[f64],
    sources: &[Vec<f64>],
    forward: &[NodeId],
    source_jacobians: &[NodeId],
    sigma: f64,
) -> Result<Vec<NodeId>, ModelError> {
    if sources.is_empty() {
        return Err(ModelError::NoSources);
    }
    let mut logits = None;
    for ((y, &q), &jy) in sources.iter().zip(forward).zip(source_jacobians) {
        // Positions in the image at y mapped back to x.
        let back = forward_flow(g, jy, y, x)?;
        let returned = g.bilinear_sample(back, q)?;
        let residual = g.sub_grid(returned)?;
        let residual = g.abs(residual);
        let residual = g.sum_channels(residual)?;
        let scaled = g.scale(residual, -sigma);
        logits = Some(match logits {
            None => scaled,
            Some(prev) => g.concat(prev, scaled)?,
        });
    }
    // exp(−σ·r_i) / Σ_j exp(−σ·r_j), evaluated as a shifted softmax.
    let weights = g.softmax_channels(logits.unwrap())?;
    (0..sources.len())
        .map(|i| {
            g.gather_channels(weights, vec![Some((i, 1.0))])
                .map_err(ModelError::from)
        })
        .collect()
}

/// `Σ_i cons_i ⊙ warp(image_i, q_i)` for one Jacobian head.
fn blend<T: Real>(
    g: &mut Graph<T>,
    x: &[f64],
    sources: &[SourceNode],
    images: &[NodeId],
    jx: NodeId,
    source_jacobians: Option<&[NodeId]>,
    sigma: f64,
) -> Result<NodeId, ModelError> {
    let forward = sources
        .iter()
        .map(|s| forward_flow(g, jx, x, &s.coord))
        .collect::<Result<Vec<_>, _>>()?;
    let warped = images
        .iter()
        .zip(&forward)
        .map(|(&img, &q)| g.bilinear_sample(img, q))
        .collect::<Result<Vec<_>, _>>()?;
    let Some(jys) = source_jacobians else {
        // A single source has weight one everywhere.
        return Ok(warped[0]);
    };
    let coords: Vec<Vec<f64>> = sources.iter().map(|s| s.coord.clone()).collect();
    let cons = build_consistency(g, x, &coords, &forward, jys, sigma)?;
    let mut out = g.mul_channel(warped[0], cons[0])?;
    for (&w, &c) in warped.iter().zip(&cons).skip(1) {
        let term = g.mul_channel(w, c)?;
        out = g.add(out, term)?;
    }
    Ok(out)
}

/// Appends the full interpolation of `sources` to coordinate `x` and
/// returns the `H×W×3` prediction.
pub fn build_interpolation<T: Real>(
    g: &mut Graph<T>,
    config: &XFieldConfig,
    nodes: &ParamNodes,
    x: &[f64],
    sources: &[SourceNode],
) -> Result<NodeId, ModelError> {
    if sources.is_empty() {
        return Err(ModelError::NoSources);
    }
    let heads_x = build_decoder(g, config, nodes, x, true)?;
    let heads_y: Option<Vec<JacobianHeads>> = if sources.len() > 1 {
        Some(
            sources
                .iter()
                .map(|s| build_decoder(g, config, nodes, &s.coord, true))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };
    let albedo_jys: Option<Vec<NodeId>> = heads_y.as_ref().map(|h| h.iter().map(|h| h.albedo).collect());
    if !config.delight {
        let images: Vec<NodeId> = sources.iter().map(|s| s.image).collect();
        return blend(g, x, sources, &images, heads_x.albedo, albedo_jys.as_deref(), config.sigma);
    }
    let mut shading = Vec::with_capacity(sources.len());
    let mut albedo = Vec::with_capacity(sources.len());
    for s in sources {
        let raw = s.log_shading.ok_or(ModelError::DelightDisabled)?;
        let e = g.exp(raw);
        let guarded = g.add_scalar(e, SHADING_EPSILON);
        albedo.push(g.div(s.image, guarded)?);
        shading.push(e);
    }
    let shading_jx = heads_x.shading.expect("de-light decoder has a shading head");
    let shading_jys: Option<Vec<NodeId>> = heads_y
        .as_ref()
        .map(|h| h.iter().map(|h| h.shading.unwrap()).collect());
    let a = blend(g, x, sources, &albedo, heads_x.albedo, albedo_jys.as_deref(), config.sigma)?;
    let e = blend(g, x, sources, &shading, shading_jx, shading_jys.as_deref(), config.sigma)?;
    Ok(g.mul(a, e)?)
}

impl<T: Real> DecoderParams<T> {
    /// Source leaves for `observations`, whose position in the slice is
    /// their shading index.
    pub(crate) fn source_nodes(
        &self,
        g: &mut Graph<T>,
        nodes: &ParamNodes,
        observations: &[Observation<T>],
        chosen: &[usize],
    ) -> Result<Vec<SourceNode>, ModelError> {
        chosen
            .iter()
            .map(|&i| {
                let obs = observations.get(i).ok_or(ModelError::NoSources)?;
                if obs.image.shape() != [self.config.height, self.config.width, 3] {
                    return Err(ModelError::ImageShape(obs.image.shape().to_vec()));
                }
                Ok(SourceNode {
                    coord: obs.coord.values().to_vec(),
                    image: g.constant(&format!("obs.{i}"), obs.image.clone()),
                    log_shading: if self.config.delight {
                        Some(nodes.get(&shading_name(i))?)
                    } else {
                        None
                    },
                })
            })
            .collect()
    }
}

/// Renders the scene at `x` from the observations listed in `chosen`.
pub fn interpolate<T: Real>(
    params: &DecoderParams<T>,
    observations: &[Observation<T>],
    chosen: &[usize],
    x: &XFieldCoord,
) -> Result<Tensor<T>, ModelError> {
    if observations.is_empty() || chosen.is_empty() {
        return Err(ModelError::NoSources);
    }
    let mut g = Graph::new();
    let nodes = params.add_to_graph(&mut g, false)?;
    let sources = params.source_nodes(&mut g, &nodes, observations, chosen)?;
    let out = build_interpolation(&mut g, &params.config, &nodes, x.clamp().values(), &sources)?;
    g.forward()?;
    Ok(g.value(out).unwrap().clone())
}

/// Normalized per-source weight maps (`H×W×1`) for warping each of
/// `sources` to `x`, given a Jacobian for any coordinate.
pub fn consistency_weights<T: Real, F>(
    x: &XFieldCoord,
    sources: &[XFieldCoord],
    mut jacobian_provider: F,
    config: ConsistencyConfig,
) -> Result<Vec<Tensor<T>>, ModelError>
where
    F: FnMut(&XFieldCoord) -> JacobianMap<T>,
{
    if sources.is_empty() {
        return Err(ModelError::NoSources);
    }
    let mut g = Graph::new();
    let jx = g.constant("jx", jacobian_provider(x).into_tensor());
    let mut forward = Vec::new();
    let mut jys = Vec::new();
    for (i, y) in sources.iter().enumerate() {
        let jy = jacobian_provider(y).into_tensor();
        if jy.shape() != g.shape(jx) {
            return Err(ModelError::ImageShape(jy.shape().to_vec()));
        }
        jys.push(g.constant(&format!("jy{i}"), jy));
        forward.push(forward_flow(&mut g, jx, x.values(), y.values())?);
    }
    let coords: Vec<Vec<f64>> = sources.iter().map(|s| s.values().to_vec()).collect();
    let cons = build_consistency(&mut g, x.values(), &coords, &forward, &jys, config.sigma)?;
    g.forward()?;
    Ok(cons.iter().map(|&c| g.value(c).unwrap().clone()).collect())
}

/// Splits observation `index` into shading `E = exp(raw_E)` and albedo
/// `A = L ⊘ (E + ε)`.
pub fn delight_decompose<T: Real>(
    observation: &Observation<T>,
    params: &DecoderParams<T>,
    index: usize,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    if !params.config.delight {
        return Err(ModelError::DelightDisabled);
    }
    let raw = params
        .tensors
        .get(&shading_name(index))
        .ok_or_else(|| ModelError::MissingTensor(shading_name(index)))?;
    if raw.shape() != observation.image.shape() {
        return Err(ModelError::ImageShape(observation.image.shape().to_vec()));
    }
    let eps = T::from_f64_lossy(SHADING_EPSILON);
    let e = raw.map(|v| v.exp());
    let a = Tensor::new(
        e.shape().to_vec(),
        observation
            .image
            .data()
            .iter()
            .zip(e.data())
            .map(|(&l, &s)| l / (s + eps))
            .collect(),
    )?;
    Ok((e, a))
}
