use mtl_core::data::{build_dataset, load_dataset, save_dataset, DataConfig};
use mtl_core::layers::BackboneSpec;
use mtl_core::multitask::*;
use std::fs;

fn small() -> DataConfig {
    DataConfig {
        n_classes: 4,
        per_class: 6,
        image_size: 16,
        ..DataConfig::default()
    }
}

#[test]
fn same_seed_writes_identical_dataset_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&build_dataset(&small()).unwrap(), a.path()).unwrap();
    save_dataset(&build_dataset(&small()).unwrap(), b.path()).unwrap();
    for name in ["manifest.json", "images.bin"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let other = DataConfig { seed: 8, ..small() };
    let c = tempfile::tempdir().unwrap();
    save_dataset(&build_dataset(&other).unwrap(), c.path()).unwrap();
    assert_ne!(fs::read(a.path().join("images.bin")).unwrap(), fs::read(c.path().join("images.bin")).unwrap());
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let d = build_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&d, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), d);
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let d = build_dataset(&small()).unwrap();
    let spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 4, BackboneSpec { input_size: 16, ..BackboneSpec::default() }, 2);
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
    let (model, _) = train(TwinModel::new(spec).unwrap(), &d, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    let again = dir.path().join("again.bin");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}
