use xfields::dataset::SyntheticScene;
use xfields::model::{delight_decompose, Observation};
use xfields::render::{Model, RenderError};
use xfields::trainer::{TrainConfig, Trainer};

fn model(delight: bool) -> Model {
    let scene = if delight {
        SyntheticScene::shadow_sweep(2, 16, None, 3).unwrap()
    } else {
        SyntheticScene::lightfield_plane(1, 16, 2.0, 2, 2).unwrap()
    };
    let manifest = scene.manifest();
    let obs: Vec<Observation> = scene
        .frames()
        .into_iter()
        .enumerate()
        .map(|(i, image)| Observation {
            coord: manifest.coord(i).unwrap(),
            image,
        })
        .collect();
    let cfg = TrainConfig {
        steps: 4,
        base_channels: 16,
        min_channels: 8,
        delight,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(scene.dims(), obs.clone(), cfg).unwrap();
    t.run(None, |_| Ok(())).unwrap();
    Model {
        name: scene.name().into(),
        params: t.params().clone(),
        observations: obs,
        training: None,
    }
}

#[test]
fn render_is_deterministic_and_in_shape() {
    let m = model(false);
    let a = m.render(&[0.3, 0.8]).unwrap();
    let b = m.render(&[0.3, 0.8]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[16, 16, 3]);
    assert!(a.is_finite());
    let big = m.render_frame(&[0.3, 0.8], 32, 24).unwrap();
    assert_eq!(big.shape(), &[24, 32, 3]);
}

#[test]
fn out_of_range_coordinates_clamp() {
    let m = model(false);
    assert_eq!(m.render(&[-0.5, 1.7]).unwrap(), m.render(&[0.0, 1.0]).unwrap());
}

#[test]
fn invalid_requests_are_errors() {
    let m = model(false);
    assert!(matches!(m.render(&[0.5]), Err(RenderError::Arity { expected: 2, got: 1 })));
    assert!(matches!(m.render(&[0.5, f64::NAN]), Err(RenderError::NonFinite(_))));
    assert!(matches!(
        m.render_effect(&[0.5, 0.5], 2, 0.1, 4, 16, 16),
        Err(RenderError::InvalidAxis { .. })
    ));
    assert!(m.render_effect(&[0.5, 0.5], 0, 0.1, 0, 16, 16).is_err());
    assert!(m.render_effect(&[0.5, 0.5], 0, -1.0, 4, 16, 16).is_err());
}

#[test]
fn effect_is_mean_of_renders() {
    let m = model(false);
    let center = [0.4, 0.6];
    let effect = m.render_effect(&center, 0, 0.2, 5, 16, 16).unwrap();
    let coords = m.effect_coords(&center, 0, 0.2, 5).unwrap();
    let frames: Vec<_> = coords.iter().map(|c| m.render(c).unwrap()).collect();
    let mut worst = 0.0f64;
    for i in 0..effect.len() {
        let mean: f64 = frames.iter().map(|f| f64::from(f.data()[i])).sum::<f64>() / 5.0;
        worst = worst.max((mean - f64::from(effect.data()[i])).abs());
    }
    assert!(worst <= 1e-6, "{worst}");
    assert!((coords[0][0] - 0.2).abs() < 1e-12 && (coords[4][0] - 0.6).abs() < 1e-12);
}

#[test]
fn degenerate_effects_equal_plain_render() {
    let m = model(false);
    let plain = m.render(&[0.25, 0.5]).unwrap();
    assert_eq!(m.render_effect(&[0.25, 0.5], 1, 0.3, 1, 16, 16).unwrap(), plain);
    assert_eq!(m.render_effect(&[0.25, 0.5], 1, 0.0, 6, 16, 16).unwrap(), plain);
}

#[test]
fn delight_factors_multiply_back() {
    let m = model(true);
    for (i, obs) in m.observations.iter().enumerate() {
        let (e, a) = delight_decompose(obs, &m.params, i).unwrap();
        let worst = e
            .data()
            .iter()
            .zip(a.data())
            .zip(obs.image.data())
            .map(|((&e, &a), &l)| (e * a - l).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "observation {i}: {worst}");
    }
    assert!(delight_decompose(&model(false).observations[0], &model(false).params, 0).is_err());
}
