use xfields::dataset::SyntheticScene;
use xfields::model::Observation;
use xfields::render::{checkpoint_file, FileError, Model, ModelFile, FORMAT_VERSION};
use xfields::trainer::{TrainConfig, Trainer};

fn trained_file() -> (ModelFile, Vec<Observation>) {
    let scene = SyntheticScene::translate1d(1, 16, 4.0, 3).unwrap();
    let manifest = scene.manifest();
    let frames = scene.frames();
    let obs: Vec<Observation> = [0, 2]
        .iter()
        .map(|&i| Observation {
            coord: manifest.coord(i).unwrap(),
            image: frames[i].clone(),
        })
        .collect();
    let cfg = TrainConfig {
        steps: 3,
        base_channels: 16,
        min_channels: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(scene.dims(), obs.clone(), cfg.clone()).unwrap();
    t.run(None, |_| Ok(())).unwrap();
    (checkpoint_file("translate", t.checkpoint(), &obs, &cfg), obs)
}

#[test]
fn round_trip_is_byte_identical() {
    let (file, obs) = trained_file();
    let bytes = file.to_bytes();
    let back = ModelFile::from_bytes(&bytes).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.observations().unwrap(), obs);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.xfield");
    file.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let model = Model::load(&path).unwrap();
    model.save(&dir.path().join("m2.xfield")).unwrap();
    let again = Model::load(&dir.path().join("m2.xfield")).unwrap();
    assert_eq!(again.params, model.params);
}

#[test]
fn rejects_bad_magic() {
    let (file, _) = trained_file();
    let mut bytes = file.to_bytes();
    bytes[0] = b'Y';
    assert!(matches!(ModelFile::from_bytes(&bytes), Err(FileError::BadMagic)));
    assert!(matches!(ModelFile::from_bytes(b"ab"), Err(FileError::BadMagic)));
}

#[test]
fn rejects_newer_version() {
    let (file, _) = trained_file();
    let mut bytes = file.to_bytes();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        ModelFile::from_bytes(&bytes),
        Err(FileError::UnsupportedVersion(v)) if v == FORMAT_VERSION + 1
    ));
}

#[test]
fn rejects_truncation_anywhere() {
    let (file, _) = trained_file();
    let bytes = file.to_bytes();
    for cut in [2, 6, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = ModelFile::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(err, FileError::Truncated | FileError::Header(_) | FileError::MissingTensor(_)),
            "cut {cut}: {err:?}"
        );
    }
}

#[test]
fn rejects_duplicate_tensor() {
    let (mut file, _) = trained_file();
    let first = file.tensors[0].clone();
    file.tensors.push(first.clone());
    assert!(matches!(
        ModelFile::from_bytes(&file.to_bytes()),
        Err(FileError::DuplicateTensor(n)) if n == first.0
    ));
}

#[test]
fn rejects_missing_and_unlisted_tensors() {
    let (file, _) = trained_file();
    let mut missing = file.clone();
    let dropped = missing.tensors.pop().unwrap().0;
    assert!(matches!(
        ModelFile::from_bytes(&missing.to_bytes()),
        Err(FileError::MissingTensor(n)) if n == dropped
    ));
    let mut extra = file;
    let t = extra.tensors[0].1.clone();
    extra.tensors.push(("stray".into(), t));
    assert!(matches!(
        ModelFile::from_bytes(&extra.to_bytes()),
        Err(FileError::UnlistedTensor(n)) if n == "stray"
    ));
}
