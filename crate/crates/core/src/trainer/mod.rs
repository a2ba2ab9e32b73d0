//! Per-scene optimization: every observed image is reconstructed from its
//! neighbours and the L1 error is minimized with Adam.

mod adam;
mod neighbors;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{GradError, Graph, Tensor};
use crate::model::{
    build_interpolation, DecoderParams, DimensionKind, DimensionSpec, ModelError, Observation, ParamSet, XFieldConfig,
    XFieldCoord,
};

pub use adam::{adam_step, AdamConfig};
pub use neighbors::{default_k, neighbor_select};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no candidate sources besides the target")]
    EmptyPool,
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (target {target}): {detail}")]
    NonFinite { step: usize, target: usize, detail: String },
    #[error("checkpoint does not match the training setup: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Learning rate for the per-observation log-shading images. Larger
    /// values let them absorb reconstruction error that should be explained
    /// by flow, which hurts unseen coordinates.
    pub shading_learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Sources per target; `None` picks [`default_k`].
    pub k: Option<usize>,
    pub delight: bool,
    pub flow_factor: usize,
    /// Steps between checkpoints; `None` disables them.
    pub checkpoint_interval: Option<usize>,
    pub base_channels: usize,
    pub min_channels: usize,
    pub sigma: f64,
    /// With de-lighting on a light-only collection, start each log-shading
    /// image at `ln(L_i / max_j L_j)` instead of zero.
    pub shading_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            shading_learning_rate: 1e-4,
            steps: 2000,
            seed: 0,
            k: None,
            delight: false,
            flow_factor: 1,
            checkpoint_interval: None,
            base_channels: 128,
            min_channels: 16,
            sigma: 10.0,
            shading_init: true,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, dims: Vec<DimensionSpec>, height: usize, width: usize) -> XFieldConfig {
        XFieldConfig {
            flow_factor: self.flow_factor,
            base_channels: self.base_channels,
            min_channels: self.min_channels,
            sigma: self.sigma,
            delight: self.delight,
            ..XFieldConfig::new(dims, height, width)
        }
    }

    fn resolve_k(&self, pool: usize) -> Result<usize, TrainError> {
        let k = self.k.unwrap_or_else(|| default_k(pool));
        if k == 0 || k > pool - 1 {
            return Err(TrainError::Config(format!(
                "k = {k} outside 1..={} for {pool} observations",
                pool - 1
            )));
        }
        Ok(k)
    }
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DecoderParams<f32>,
    /// Steps completed.
    pub step: usize,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub losses: Vec<f64>,
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub target: usize,
    pub loss: f64,
}

pub struct Trainer {
    config: TrainConfig,
    k: usize,
    observations: Vec<Observation>,
    coords: Vec<XFieldCoord>,
    state: Checkpoint,
}

impl Trainer {
    /// Fresh parameters for `observations`, all of the same resolution.
    pub fn new(
        dims: Vec<DimensionSpec>,
        observations: Vec<Observation>,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if observations.len() < 2 {
            return Err(TrainError::TooFewObservations(observations.len()));
        }
        let (h, w, _) = observations[0].image.hwc()?;
        let model = config.model_config(dims, h, w);
        let mut params = DecoderParams::init(model, observations.len(), config.seed)?;
        if config.delight && config.shading_init && dims_are_light(&params.config.dims) {
            for (i, l) in max_log_shading(&observations).into_iter().enumerate() {
                params.tensors.insert(format!("shading.{i}"), l);
            }
        }
        let zeros = |p: &DecoderParams<f32>| {
            let mut s = ParamSet::new();
            for (n, t) in p.tensors.iter() {
                s.insert(n, Tensor::zeros(t.shape().to_vec()));
            }
            s
        };
        let state = Checkpoint {
            m: zeros(&params),
            v: zeros(&params),
            params,
            step: 0,
            losses: Vec::new(),
        };
        Self::resume(state, observations, config)
    }

    /// Continues from `checkpoint`.
    pub fn resume(
        checkpoint: Checkpoint,
        observations: Vec<Observation>,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if config.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if observations.len() < 2 {
            return Err(TrainError::TooFewObservations(observations.len()));
        }
        let k = config.resolve_k(observations.len())?;
        let p = &checkpoint.params;
        for obs in &observations {
            if obs.image.shape() != [p.config.height, p.config.width, 3] {
                return Err(ModelError::ImageShape(obs.image.shape().to_vec()).into());
            }
            if obs.coord.len() != p.config.n_d() {
                return Err(ModelError::Arity {
                    expected: p.config.n_d(),
                    got: obs.coord.len(),
                }
                .into());
            }
        }
        if checkpoint.m.names() != p.tensors.names() || checkpoint.v.names() != p.tensors.names() {
            return Err(TrainError::Checkpoint("moment tensors do not match parameters".into()));
        }
        if checkpoint.losses.len() != checkpoint.step {
            return Err(TrainError::Checkpoint("loss history length differs from step".into()));
        }
        let coords = observations.iter().map(|o| o.coord.clone()).collect();
        Ok(Self {
            config,
            k,
            observations,
            coords,
            state: checkpoint,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &DecoderParams<f32> {
        &self.state.params
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.state.losses
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Target observation for a global step: seeded shuffled epochs, each a
    /// permutation of all observations. Stateless, so resuming is exact.
    pub fn target_at(&self, step: usize) -> usize {
        let n = self.observations.len();
        let epoch = (step / n) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order[step % n]
    }

    /// Sources used to reconstruct observation `target`.
    pub fn sources_for(&self, target: usize) -> Result<Vec<usize>, TrainError> {
        neighbor_select(&self.coords[target], &self.coords, self.k)
    }

    /// Loss and gradients for reconstructing `target` with the current
    /// parameters, without updating them.
    pub fn loss_and_gradients(&self, target: usize) -> Result<(f64, ParamSet<f32>), TrainError> {
        let params = &self.state.params;
        let sources = self.sources_for(target)?;
        let mut g = Graph::new();
        let nodes = params.add_to_graph(&mut g, true)?;
        let src = params.source_nodes(&mut g, &nodes, &self.observations, &sources)?;
        let pred = build_interpolation(&mut g, &params.config, &nodes, self.coords[target].values(), &src)?;
        let truth = g.constant("target", self.observations[target].image.clone());
        let diff = g.sub(pred, truth)?;
        let diff = g.abs(diff);
        let loss = g.mean(diff);
        g.forward()?;
        let value = f64::from(g.value(loss).unwrap().item());
        let grads = g.backward(loss)?;
        let mut out = ParamSet::new();
        for name in params.tensors.names() {
            let grad = grads
                .by_name(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            out.insert(name, grad.clone());
        }
        Ok((value, out))
    }

    /// One Adam step on the next scheduled target.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let step = self.state.step;
        let target = self.target_at(step);
        let (loss, grads) = match self.loss_and_gradients(target) {
            Err(TrainError::Grad(e @ GradError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite {
                    step,
                    target,
                    detail: e.to_string(),
                })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                target,
                detail: format!("loss = {loss}"),
            });
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                target,
                detail: format!("gradient of `{name}`"),
            });
        }
        let t = step as u64 + 1;
        let shading_adam = AdamConfig {
            learning_rate: self.config.shading_learning_rate,
            ..self.config.adam
        };
        let state = &mut self.state;
        let moments = state.m.iter_mut().zip(state.v.iter_mut());
        for ((name, p), ((_, m), (_, v))) in state.params.tensors.iter_mut().zip(moments) {
            let grad = grads.get(name).unwrap();
            let adam = if name.starts_with("shading.") {
                &shading_adam
            } else {
                &self.config.adam
            };
            adam_step(p.data_mut(), grad.data(), m.data_mut(), v.data_mut(), t, adam);
        }
        state.step += 1;
        state.losses.push(loss);
        Ok(StepReport { step, target, loss })
    }

    /// Runs until `config.steps`, appending `step,loss` rows to `log` and
    /// calling `on_checkpoint` every `checkpoint_interval` steps.
    pub fn run(
        &mut self,
        mut log: Option<&mut dyn Write>,
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while !self.is_done() {
            let r = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{}", r.step, r.loss).map_err(|e| TrainError::Io(e.to_string()))?;
            }
            if let Some(every) = self.config.checkpoint_interval {
                if every > 0 && self.state.step % every == 0 {
                    on_checkpoint(&self.state)?;
                }
            }
        }
        Ok(())
    }
}

fn dims_are_light(dims: &[DimensionSpec]) -> bool {
    dims.iter().all(|d| d.kind == DimensionKind::Light)
}

/// Bounds the initial shading away from zero.
const MIN_SHADING_RATIO: f32 = 0.05;

/// `ln(L_i / max_j L_j)` per pixel and channel. When only the light
/// changes, the brightest observation of a pixel approximates its unshadowed
/// appearance, so this starts shading at the observed darkening.
pub fn max_log_shading(observations: &[Observation]) -> Vec<Tensor<f32>> {
    let n = observations[0].image.len();
    let brightest: Vec<f32> = (0..n)
        .map(|p| {
            observations
                .iter()
                .map(|o| o.image.data()[p])
                .fold(0.0f32, f32::max)
        })
        .collect();
    observations
        .iter()
        .map(|o| {
            let data = o
                .image
                .data()
                .iter()
                .zip(&brightest)
                .map(|(&l, &m)| {
                    if l <= 0.0 || m <= 0.0 {
                        0.0
                    } else {
                        (l / m).max(MIN_SHADING_RATIO).ln()
                    }
                })
                .collect();
            Tensor::new(o.image.shape().to_vec(), data).unwrap()
        })
        .collect()
}

/// Writes the CSV header and every recorded loss.
pub fn write_loss_log(losses: &[f64], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

/// Trains from scratch and returns the final parameters and loss history.
pub fn train(
    dims: Vec<DimensionSpec>,
    observations: Vec<Observation>,
    config: TrainConfig,
) -> Result<Checkpoint, TrainError> {
    let mut t = Trainer::new(dims, observations, config)?;
    t.run(None, |_| Ok(()))?;
    Ok(t.into_checkpoint())
}
