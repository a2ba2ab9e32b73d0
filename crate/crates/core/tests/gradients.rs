use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfields::gradcore::{grad_check, GradCheckOptions, GradError, Graph, NodeId, Tensor};
use xfields::model::{
    build_interpolation, DecoderParams, DimensionKind, DimensionSpec, ParamNodes, SourceNode,
    XFieldConfig,
};

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `Σ w ⊙ a` with fixed positive weights, so no gradient component is
/// trivially tiny.
fn weighted(g: &mut Graph<f64>, a: NodeId, seed: u64) -> Result<NodeId, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.shape(a), 0.5, 1.5);
    let w = g.constant("w", w);
    let p = g.mul(a, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, point: Vec<Tensor<f64>>, build: F)
where
    F: FnOnce(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GradError>,
{
    let err = grad_check(build, &point, &GradCheckOptions::default())
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < TOL, "{name}: relative error {err:e}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, &[3, 4, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4, 2], 0.5, 2.0);
    check("add", vec![a.clone(), b.clone()], |g, p| {
        let y = g.add(p[0], p[1])?;
        weighted(g, y, 1)
    });
    check("sub", vec![a.clone(), b.clone()], |g, p| {
        let y = g.sub(p[0], p[1])?;
        weighted(g, y, 2)
    });
    check("mul", vec![a.clone(), b.clone()], |g, p| {
        let y = g.mul(p[0], p[1])?;
        weighted(g, y, 3)
    });
    check("div", vec![a.clone(), b.clone()], |g, p| {
        let y = g.div(p[0], p[1])?;
        weighted(g, y, 4)
    });
    check("add_scalar", vec![a.clone()], |g, p| {
        let y = g.add_scalar(p[0], 0.7);
        weighted(g, y, 5)
    });
    check("scale", vec![a.clone()], |g, p| {
        let y = g.scale(p[0], -2.5);
        weighted(g, y, 6)
    });
    check("exp", vec![a.clone()], |g, p| {
        let y = g.exp(p[0]);
        weighted(g, y, 7)
    });
    // Keep |a| away from the kink at zero.
    let signed = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check("abs", vec![signed.clone()], |g, p| {
        let y = g.abs(p[0]);
        weighted(g, y, 8)
    });
    check("leaky_relu", vec![signed], |g, p| {
        let y = g.leaky_relu(p[0], 0.2)?;
        weighted(g, y, 9)
    });
}

#[test]
fn reductions_and_channel_ops() {
    let mut r = rng(2);
    let a = rand_tensor(&mut r, &[3, 4, 3], -1.0, 1.0);
    let m = rand_tensor(&mut r, &[3, 4, 1], -1.0, 1.0);
    check("sum", vec![a.clone()], |g, p| {
        let y = g.sum(p[0]);
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    });
    check("mean", vec![a.clone()], |g, p| {
        let y = g.mean(p[0]);
        Ok(g.exp(y))
    });
    check("sum_channels", vec![a.clone()], |g, p| {
        let y = g.sum_channels(p[0])?;
        weighted(g, y, 10)
    });
    check("softmax_channels", vec![a.scale_for_test(4.0)], |g, p| {
        let y = g.softmax_channels(p[0])?;
        weighted(g, y, 11)
    });
    check("mul_channel", vec![a.clone(), m], |g, p| {
        let y = g.mul_channel(p[0], p[1])?;
        weighted(g, y, 12)
    });
    let b = rand_tensor(&mut r, &[3, 4, 2], -1.0, 1.0);
    check("concat", vec![a.clone(), b], |g, p| {
        let y = g.concat(p[0], p[1])?;
        weighted(g, y, 13)
    });
    check("gather_channels", vec![a.clone()], |g, p| {
        let y = g.gather_channels(p[0], vec![Some((2, 1.5)), None, Some((0, -1.0)), Some((2, 0.5))])?;
        weighted(g, y, 14)
    });
    check("reshape", vec![a], |g, p| {
        let y = g.reshape(p[0], vec![12, 3])?;
        weighted(g, y, 15)
    });
}

trait ScaleForTest {
    fn scale_for_test(&self, c: f64) -> Self;
}

impl ScaleForTest for Tensor<f64> {
    fn scale_for_test(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }
}

#[test]
fn linear_and_broadcast() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[3], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[5], -1.0, 1.0);
    check("linear", vec![x.clone(), w, b], |g, p| {
        let y = g.linear(p[0], p[1], p[2])?;
        weighted(g, y, 16)
    });
    check("broadcast_pixels", vec![x], |g, p| {
        let y = g.broadcast_pixels(p[0], 2, 3)?;
        weighted(g, y, 17)
    });
}

#[test]
fn convolution_and_resampling() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[4, 4, 2], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[3, 3, 2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    check("conv2d", vec![x.clone(), k, b], |g, p| {
        let y = g.conv2d(p[0], p[1], p[2])?;
        weighted(g, y, 18)
    });
    check("upsample2x", vec![x.clone()], |g, p| {
        let y = g.upsample2x(p[0])?;
        weighted(g, y, 19)
    });
    check("resize", vec![x], |g, p| {
        let y = g.resize(p[0], 3, 7)?;
        weighted(g, y, 20)
    });
}

#[test]
fn warp_ops() {
    let mut r = rng(5);
    let img = rand_tensor(&mut r, &[5, 6, 3], 0.0, 1.0);
    // Interior, non-integer positions, some clamped outside the image.
    let mut pos = Tensor::from_fn(vec![3, 4, 2], |i| {
        let base: f64 = r.gen_range(0.1..0.9);
        let cell = (i / 2 % 4) as f64;
        base + cell
    });
    pos.data_mut()[0] = -3.3;
    pos.data_mut()[3] = 9.7;
    check("bilinear_sample", vec![img, pos.clone()], |g, p| {
        let y = g.bilinear_sample(p[0], p[1])?;
        weighted(g, y, 21)
    });
    let jac = rand_tensor(&mut r, &[3, 4, 4], -2.0, 2.0);
    check("project_flow", vec![jac], |g, p| {
        let y = g.project_flow(p[0], &[0.3, -0.7])?;
        weighted(g, y, 22)
    });
    check("sub_grid", vec![pos], |g, p| {
        let y = g.sub_grid(p[0])?;
        let y = g.mul(y, y)?;
        weighted(g, y, 23)
    });
}

fn offset_params(delight: bool, dims: Vec<DimensionSpec>, n_obs: usize, seed: u64) -> DecoderParams<f64> {
    let config = XFieldConfig {
        base_channels: 8,
        min_channels: 4,
        delight,
        ..XFieldConfig::new(dims, 8, 8)
    };
    let mut params = DecoderParams::<f64>::init(config, n_obs, seed).unwrap();
    // Move away from the zero head, where every sample sits exactly on a
    // pixel centre and bilinear filtering has a kink.
    let mut r = rng(seed + 100);
    for (name, t) in params.tensors.iter_mut() {
        let spread = if name.starts_with("head") || name.starts_with("shading_head") {
            0.3
        } else if name.starts_with("shading.") {
            0.2
        } else {
            0.05
        };
        for v in t.data_mut() {
            *v += r.gen_range(-spread..spread);
        }
    }
    params
}

fn pipeline_loss_check(delight: bool, dims: Vec<DimensionSpec>, coords: Vec<Vec<f64>>, seed: u64) {
    let n = coords.len();
    let params = offset_params(delight, dims, n - 1, seed);
    let mut r = rng(seed);
    let images: Vec<Tensor<f64>> = (0..n).map(|_| rand_tensor(&mut r, &[8, 8, 3], 0.0, 1.0)).collect();
    let names = params.tensors.names();
    let point: Vec<Tensor<f64>> = names.iter().map(|n| params.tensors.get(n).unwrap().clone()).collect();
    let config = params.config.clone();
    let build = |g: &mut Graph<f64>, leaves: &[NodeId]| -> Result<NodeId, GradError> {
        let model_err = |e: xfields::ModelError| GradError::InvalidArgument(e.to_string());
        let nodes = ParamNodes::new(names.iter().cloned().zip(leaves.iter().copied()));
        // Target is the last image; the others are sources.
        let sources: Vec<SourceNode> = (0..n - 1)
            .map(|i| SourceNode {
                coord: coords[i].clone(),
                image: g.constant(&format!("obs.{i}"), images[i].clone()),
                log_shading: delight.then(|| nodes.get(&format!("shading.{i}")).unwrap()),
            })
            .collect();
        let pred = build_interpolation(g, &config, &nodes, &coords[n - 1], &sources).map_err(model_err)?;
        let truth = g.constant("target", images[n - 1].clone());
        let d = g.sub(pred, truth)?;
        let d = g.abs(d);
        Ok(g.mean(d))
    };
    let opts = GradCheckOptions {
        max_components: Some(12),
        seed,
        ..GradCheckOptions::default()
    };
    let err = grad_check(build, &point, &opts).unwrap();
    assert!(err < TOL, "pipeline (delight {delight}) relative error {err:e}");
}

#[test]
fn training_loss_gradient_1d() {
    let dims = vec![DimensionSpec::new("t", DimensionKind::Time, 0.0, 1.0)];
    pipeline_loss_check(false, dims, vec![vec![0.0], vec![1.0], vec![0.37]], 7);
}

#[test]
fn training_loss_gradient_view_grid() {
    let dims = vec![
        DimensionSpec::new("u", DimensionKind::ViewHorizontal, 0.0, 1.0),
        DimensionSpec::new("v", DimensionKind::ViewVertical, 0.0, 1.0),
    ];
    let coords = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.43, 0.61]];
    pipeline_loss_check(false, dims, coords, 11);
}

#[test]
fn training_loss_gradient_delight() {
    let dims = vec![DimensionSpec::new("light", DimensionKind::Light, 0.0, 1.0)];
    pipeline_loss_check(true, dims, vec![vec![0.0], vec![0.5], vec![1.0], vec![0.71]], 9);
}
