use std::fs;
use std::sync::atomic::AtomicBool;

use adaptive_attention::checkpoint::{load_checkpoint, read_manifest};
use adaptive_attention::data::{
    augment, epoch_rng, load_cifar100, make_splits, split_indices, synthetic_cifar, write_cifar_dir, AugmentConfig,
    DatasetSplit, IMAGE_BYTES, RECORD_BYTES,
};
use adaptive_attention::model::{Model, ModelConfig, Primitive, SizeClass};
use adaptive_attention::tensor::{Parameter, Tensor};
use adaptive_attention::train::{evaluate, sgd_nesterov_step, train, RunOutput, TrainConfig, METRICS_HEADER};
use adaptive_attention::Error;

fn tiny(primitive: Primitive) -> ModelConfig {
    ModelConfig {
        stem_channels: 4,
        channels: vec![8],
        strides: vec![2],
        heads: 2,
        expansion: 1,
        ..ModelConfig::new(primitive, SizeClass::Small)
    }
}

fn data() -> (DatasetSplit, DatasetSplit) {
    let (train_raw, _) = synthetic_cifar(300, 0, 3);
    let (tr, va, _) = make_splits(&train_raw, 100, 1.0, 0).unwrap();
    (tr, va)
}

fn cfg(primitive: Primitive, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 25,
        ..TrainConfig::for_primitive(primitive)
    }
    .resolved()
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path().join("run"));
    let (tr, va) = data();
    let mut m = Model::<f32>::new(tiny(Primitive::Conv), 0).unwrap();
    let metrics = train(&mut m, &tr, &va, &cfg(Primitive::Conv, 0), Some(&out), None, |_| {}).unwrap();
    assert!(metrics.epochs.is_empty());
    assert_eq!(metrics.best_epoch, None);
    assert!(out.last_path().join("manifest.txt").is_file());
    assert!(!out.best_path().exists());
    assert_eq!(read_manifest(&out.last_path()).unwrap().epoch, 0);
    assert_eq!(
        fs::read_to_string(out.metrics_path()).unwrap().trim_end(),
        METRICS_HEADER
    );
}

#[test]
fn infinite_logit_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path().join("run"));
    let (tr, va) = data();
    let mut m = Model::<f32>::new(tiny(Primitive::Adaptive), 0).unwrap();
    m.head_bias.value.data_mut()[7] = f32::INFINITY;
    let err = train(&mut m, &tr, &va, &cfg(Primitive::Adaptive, 2), Some(&out), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0, .. }), "{err}");
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.dir.join("diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["completed_epochs"], 0);
}

#[test]
fn plain_step_reduces_quadratic() {
    // f(p) = 0.5 * sum a_i (p_i - c_i)^2
    let a = [1.0, 3.0, 0.5, 10.0];
    let c = [0.2, -1.0, 4.0, 0.0];
    let mut p = Parameter::new(Tensor::<f64>::from_vec(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    let f = |p: &[f64]| (0..4).map(|i| 0.5 * a[i] * (p[i] - c[i]).powi(2)).sum::<f64>();
    let mut v = vec![0.0; 4];
    let mut prev = f(p.value.data());
    for _ in 0..5 {
        let grad: Vec<f64> = (0..4).map(|i| a[i] * (p.value.data()[i] - c[i])).collect();
        sgd_nesterov_step(&mut p, &Tensor::from_vec(&[4], grad).unwrap(), &mut v, 1e-3, 0.0, 0.0).unwrap();
        let now = f(p.value.data());
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn seeded_runs_are_bit_identical_and_checkpoints_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = data();
    let run = |name: &str| {
        let out = RunOutput::new(dir.path().join(name));
        let mut m = Model::<f32>::new(tiny(Primitive::Adaptive), 5).unwrap();
        let mut rows = Vec::new();
        let metrics = train(&mut m, &tr, &va, &cfg(Primitive::Adaptive, 2), Some(&out), None, |r| {
            rows.push(r.clone())
        })
        .unwrap();
        (metrics, rows, out)
    };
    let (a, rows, out) = run("a");
    let (b, _, _) = run("b");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows, a.epochs);
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_acc.to_bits(), y.val_acc.to_bits());
        assert_eq!(x.spans, y.spans);
    }
    assert!(a.epochs.iter().all(|e| e.spans.len() == 1 && e.spans[0].len() == 2));

    let (mut best, meta) = load_checkpoint::<f32>(&out.best_path()).unwrap();
    assert_eq!(Some(meta.epoch), a.best_epoch);
    let (_, acc) = evaluate(&mut best, &va, 25).unwrap();
    assert_eq!(Some(acc), a.best_val_acc);
    let (mut last, _) = load_checkpoint::<f32>(&out.last_path()).unwrap();
    let (_, acc) = evaluate(&mut last, &va, 50).unwrap();
    assert_eq!(acc, a.epochs.last().unwrap().val_acc);

    let csv = fs::read_to_string(out.metrics_path()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn raised_stop_flag_interrupts_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path().join("run"));
    let (tr, va) = data();
    let mut m = Model::<f32>::new(tiny(Primitive::Fixed), 0).unwrap();
    let stop = AtomicBool::new(true);
    let metrics = train(
        &mut m,
        &tr,
        &va,
        &cfg(Primitive::Fixed, 3),
        Some(&out),
        Some(&stop),
        |_| {},
    )
    .unwrap();
    assert!(metrics.interrupted);
    assert!(metrics.epochs.is_empty());
    assert_eq!(
        read_manifest(&out.last_path()).unwrap().metrics["interrupted_in_epoch"],
        1
    );
}

#[test]
fn loader_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (train_raw, test_raw) = synthetic_cifar(50, 20, 9);
    write_cifar_dir(dir.path(), &train_raw, &test_raw).unwrap();
    let (a, b) = load_cifar100(dir.path()).unwrap();
    assert_eq!((a.len(), b.len()), (50, 20));
    assert_eq!(a.labels, train_raw.labels);
    assert_eq!(a.image(49), train_raw.image(49));
    assert_eq!(b.to_records(), test_raw.to_records());

    let train_path = dir.path().join("train.bin");
    let bytes = fs::read(&train_path).unwrap();
    fs::write(&train_path, &bytes[..RECORD_BYTES * 3 + 100]).unwrap();
    match load_cifar100(dir.path()) {
        Err(Error::TruncatedRecord { offset, .. }) => assert_eq!(offset, (RECORD_BYTES * 3) as u64),
        other => panic!("{other:?}"),
    }
    fs::remove_file(&train_path).unwrap();
    assert!(matches!(load_cifar100(dir.path()), Err(Error::MissingFile(_))));
}

#[test]
fn split_sizes_and_class_coverage() {
    let labels: Vec<u8> = (0..50_000).map(|i| (i % 100) as u8).collect();
    let full = split_indices(&labels, 5000, 1.0, 1).unwrap();
    assert_eq!((full.train.len(), full.val.len()), (45_000, 5000));
    let tenth = split_indices(&labels, 5000, 0.1, 1).unwrap();
    assert_eq!(tenth.train.len(), 4500);
    let mut per_class = [0; 100];
    tenth.train.iter().for_each(|&i| per_class[labels[i] as usize] += 1);
    assert!(per_class.iter().all(|&c| c == 45));
    let twentieth = split_indices(&labels, 5000, 0.05, 1).unwrap();
    let mut seen = [false; 100];
    twentieth.train.iter().for_each(|&i| seen[labels[i] as usize] = true);
    assert!(seen.iter().all(|&s| s));
    for f in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(matches!(
            split_indices(&labels, 5000, f, 1),
            Err(Error::FractionOutOfRange(_))
        ));
    }
}

#[test]
fn normalized_training_set_statistics() {
    let (train_raw, _) = synthetic_cifar(2000, 0, 12);
    let (tr, _, norm) = make_splits(&train_raw, 500, 1.0, 4).unwrap();
    assert!(norm.std.iter().all(|&s| s > 0.0));
    let plane = 32 * 32;
    for c in 0..3 {
        let (mut s, mut q, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..tr.len() {
            for &v in &tr.image(i)[c * plane..(c + 1) * plane] {
                s += v as f64;
                q += (v as f64).powi(2);
                n += 1.0;
            }
        }
        let mean = s / n;
        let std = (q / n - mean * mean).sqrt();
        assert!(mean.abs() <= 0.02, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() <= 0.05, "channel {c} std {std}");
    }
}

#[test]
fn augmentation_is_seeded() {
    let (raw, _) = synthetic_cifar(4, 0, 2);
    let (tr, _, _) = make_splits(&raw, 0, 1.0, 0).unwrap();
    let (batch, _) = tr.batch(&[0, 1, 2, 3]);
    let run = |stream| {
        let mut b = batch.clone();
        augment(&mut b, &mut epoch_rng(7, 3, stream), &AugmentConfig::default());
        b
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), batch);
    let mut same = batch.clone();
    augment(&mut same, &mut epoch_rng(7, 3, 1), &AugmentConfig::disabled());
    assert_eq!(same, batch);
    assert_eq!(batch.len(), 4 * IMAGE_BYTES);
}
