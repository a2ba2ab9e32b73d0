use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradError, Graph, NodeId, Tensor};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-4]`.
    pub step: f64,
    /// Probe at most this many components per leaf (chosen by `seed`);
    /// `None` probes every component.
    pub max_components: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_components: None,
            seed: 0,
        }
    }
}

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `build` receives one trainable leaf per tensor of `point` (named `p0`,
/// `p1`, …) and must return the scalar output node. Fails with
/// [`GradError::NonDifferentiable`] when the point sits on a kink or a
/// probe crosses one; the caller should offset the point.
pub fn grad_check<F>(build: F, point: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64, GradError>
where
    F: FnOnce(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GradError>,
{
    if !(1e-7..=1e-4).contains(&opts.step) {
        return Err(GradError::InvalidArgument(format!(
            "finite-difference step {} outside [1e-7, 1e-4]",
            opts.step
        )));
    }
    let mut graph = Graph::new();
    let mut leaves = Vec::with_capacity(point.len());
    for (i, t) in point.iter().enumerate() {
        leaves.push(graph.parameter(&format!("p{i}"), t.shape().to_vec())?);
    }
    let out = build(&mut graph, &leaves)?;
    for (&leaf, t) in leaves.iter().zip(point) {
        graph.bind(leaf, t.clone())?;
    }
    graph.forward()?;
    graph.check_differentiable(opts.step)?;
    let base_sig = graph.branch_signature();
    let grads = graph.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for (&leaf, t) in leaves.iter().zip(point) {
        let analytic = grads.get(leaf).expect("every leaf is trainable");
        let components: Vec<usize> = match opts.max_components {
            Some(m) if m < t.len() => sample(&mut rng, t.len(), m).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for k in components {
            let mut eval = |offset: f64| -> Result<f64, GradError> {
                let mut probe = t.clone();
                probe.data_mut()[k] += offset;
                graph.bind(leaf, probe)?;
                graph.forward()?;
                if graph.branch_signature() != base_sig {
                    return Err(GradError::NonDifferentiable {
                        node: leaf.index(),
                        op: "probe crosses a kink",
                    });
                }
                Ok(graph.value(out).unwrap().item())
            };
            let plus = eval(opts.step)?;
            let minus = eval(-opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        graph.bind(leaf, t.clone())?;
    }
    Ok(worst)
}
