//! Saving mid-run and resuming must reproduce the uninterrupted run.

use fcnet::checkpoint;
use fcnet_core::model::FcNet;
use fcnet_core::synthdata::{generate_split, SceneConfig, Split};
use fcnet_core::train::Trainer;
use fcnet_core::Config;

fn setup() -> (Trainer, Vec<fcnet_core::synthdata::Sample>) {
    let cfg = Config {
        batch_size: 4,
        epochs: 4,
        lr_decay_epoch: 1,
        ..Config::toy()
    };
    let data = generate_split(2, 12, Split::Train, &SceneConfig::new(cfg.height, cfg.width)).unwrap();
    (Trainer::new(FcNet::new(cfg).unwrap()), data)
}

#[test]
fn resumed_training_matches_uninterrupted_training_for_five_steps() {
    let (mut straight, data) = setup();
    for _ in 0..2 {
        straight.step(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.fcnt");
    checkpoint::save(&path, &straight).unwrap();
    let mut resumed = checkpoint::load(&path).unwrap();
    assert_eq!(resumed.model.params, straight.model.params);

    // Five steps cross the epoch boundary (3 batches per epoch) and the
    // learning-rate decay.
    for i in 0..5 {
        let a = straight.step(&data).unwrap();
        let b = resumed.step(&data).unwrap();
        assert_eq!(a, b, "step {i}");
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.adam.step, straight.adam.step);
    assert_eq!(
        (resumed.epoch, resumed.batch_in_epoch),
        (straight.epoch, straight.batch_in_epoch)
    );
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let (t, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.fcnt");
    checkpoint::save(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FCNT");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::load(&path).is_err());
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(checkpoint::load(&path).is_err());
}
