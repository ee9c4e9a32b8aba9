//! Optimizer loop, checkpoints and resumption.

mod common;

use common::phantom_dataset;
use nodule_detect::backbone::DecoderType;
use nodule_detect::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointMeta};
use nodule_detect::model::{Detector, DetectorConfig};
use nodule_detect::train::{checkpoint_path, TrainConfig, Trainer, TRAIN_LOG_FILE};
use nodule_detect::{Error, Scalar};

fn micro(decoder: DecoderType) -> DetectorConfig {
    DetectorConfig::micro().with_decoder(decoder)
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 3e-3,
        lr_drop_epoch: epochs,
        ..Default::default()
    }
}

fn params<T: Scalar>(d: &Detector<T>) -> Vec<T> {
    d.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_d, data) = phantom_dataset::<f64>(4, 64, 1);
    let mut t = Trainer::new(Detector::<f64>::new(micro(DecoderType::TypeII)).unwrap(), short(1), Some(data.p99)).unwrap();
    t.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save(&path).unwrap();
    let ck = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(params(&ck.detector), params(&t.detector));
    assert_eq!(ck.manifest.epoch, 1);
    assert_eq!(ck.manifest.decoder_type, DecoderType::TypeII);
    assert_eq!(ck.manifest.p99, Some(data.p99));
    let adam = ck.adam.unwrap();
    assert_eq!(adam.step, t.adam.step);
    let images = nodule_detect::Tensor::stack(&[data.samples[0].pixels.clone()]).unwrap();
    assert_eq!(ck.detector.detect(&images).unwrap(), t.detector.detect(&images).unwrap());
}

#[test]
fn checkpoint_precision_crosses_scalar_types() {
    let det = Detector::<f32>::new(micro(DecoderType::TypeI)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    save_checkpoint(&path, &det, &CheckpointMeta::default(), None).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    let a: Vec<f64> = params(&det).iter().map(|&v| v as f64).collect();
    assert_eq!(a, params(&back.detector));
    assert_eq!(read_manifest(&path).unwrap().dtype, "f32");
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_rejected() {
    let det = Detector::<f32>::new(micro(DecoderType::TypeI)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    save_checkpoint(&path, &det, &CheckpointMeta::default(), None).unwrap();
    let m = read_manifest(&path).unwrap();
    assert!(m.ensure_compatible(&micro(DecoderType::TypeI)).is_ok());
    assert!(matches!(m.ensure_compatible(&micro(DecoderType::TypeII)), Err(Error::Version(_))));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
    let bytes = std::fs::read(dir.path().join("w.ckpt")).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let (_d, data) = phantom_dataset::<f32>(4, 64, 2);
    let det = || Detector::<f32>::new(micro(DecoderType::TypeII)).unwrap();
    let mut straight = Trainer::new(det(), short(3), Some(data.p99 as f64)).unwrap();
    straight.fit(&data, None, |_| {}).unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(det(), short(1), Some(data.p99 as f64)).unwrap();
    first.fit(&data, Some(out.path()), |_| {}).unwrap();
    assert!(out.path().join(TRAIN_LOG_FILE).exists());
    let ck = load_checkpoint::<f32>(&checkpoint_path(out.path(), 1)).unwrap();
    let mut resumed = Trainer::resume(ck, short(3)).unwrap();
    resumed.fit(&data, None, |_| {}).unwrap();

    assert_eq!(params(&resumed.detector), params(&straight.detector));
    assert_eq!(resumed.log, straight.log);
}

#[test]
fn overfits_eight_images() {
    let (_d, data) = phantom_dataset::<f32>(8, 64, 3);
    let mut t = Trainer::new(Detector::<f32>::new(micro(DecoderType::TypeII)).unwrap(), short(30), None).unwrap();
    t.fit(&data, None, |_| {}).unwrap();
    let (first, last) = (t.log[0].loss.total, t.log.last().unwrap().loss.total);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert!(t.log.iter().all(|e| e.loss.total.is_finite()));
}
