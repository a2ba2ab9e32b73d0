//! Fixtures shared by the benchmarks.

use xfields::dataset::SyntheticScene;
use xfields::model::{DecoderParams, Observation};
use xfields::render::Model;
use xfields::trainer::TrainConfig;

/// An untrained model over a translate scene; render cost does not depend
/// on the weights.
pub fn translate_model(size: usize, base_channels: usize) -> Model {
    let scene = SyntheticScene::translate1d(1, size, 8.0, 3).expect("valid scene");
    let manifest = scene.manifest();
    let observations: Vec<Observation> = scene
        .frames()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == 0)
        .map(|(i, image)| Observation {
            coord: manifest.coord(i).expect("coordinate"),
            image,
        })
        .collect();
    let config = TrainConfig {
        base_channels,
        ..TrainConfig::default()
    }
    .model_config(scene.dims(), size, size);
    Model {
        name: scene.name().into(),
        params: DecoderParams::init(config, observations.len(), 0).expect("valid config"),
        observations,
        training: None,
    }
}
