use std::sync::OnceLock;

use rfprint::dataset::{generate_in_memory, split_dataset, Dataset, SplitManifest};
use rfprint::model::{ModelSpec, PrnnCnnConfig};
use rfprint::residual::PreprocessParams;
use rfprint::train::{init_model, train_loop, LrSchedule, TrainConfig, TrainOutcome};
use rfprint::waveform::GenConfig;

fn toy() -> &'static (Dataset, SplitManifest) {
    static DATA: OnceLock<(Dataset, SplitManifest)> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = GenConfig {
            devices: 2,
            transmissions_per_device: 100,
            seed: 21,
            ..GenConfig::default()
        };
        let (ds, report) = generate_in_memory(&cfg, &PreprocessParams::default()).unwrap();
        assert_eq!(report.extracted, 200, "{:?}", report.failures);
        let split = split_dataset(&ds.records(), 21).unwrap();
        (ds, split)
    })
}

fn spec() -> ModelSpec {
    ModelSpec::prnn_cnn(&PrnnCnnConfig {
        classes: 2,
        ..PrnnCnnConfig::default()
    })
    .unwrap()
}

fn run(epochs: usize, target: Option<f64>) -> TrainOutcome {
    let (ds, split) = toy();
    let cfg = TrainConfig {
        max_epochs: epochs,
        target_dev_accuracy: target,
        batch_size: 170,
        seed: 5,
        ..TrainConfig::default()
    };
    train_loop(&cfg, init_model(spec(), 5).unwrap(), ds, split).unwrap()
}

fn toy_outcome() -> &'static TrainOutcome {
    static OUT: OnceLock<TrainOutcome> = OnceLock::new();
    OUT.get_or_init(|| run(30, None))
}

#[test]
fn toy_set_reaches_95_percent_dev_accuracy() {
    let out = toy_outcome();
    assert!(out.best_dev_accuracy >= 0.95, "{:?}", out.history);
}

#[test]
fn training_loss_falls_below_epoch_zero() {
    let h = run(10, Some(2.0)).history;
    assert_eq!(h.len(), 10);
    let later = h[1..].iter().map(|r| r.train_loss).sum::<f64>() / 9.0;
    assert!(later < h[0].train_loss, "{later} vs {}", h[0].train_loss);
}

#[test]
fn best_checkpoint_is_history_maximum() {
    let out = toy_outcome();
    let max = out.history.iter().map(|r| r.dev_acc).fold(f64::MIN, f64::max);
    assert_eq!(out.best_dev_accuracy, max);
    let first = out.history.iter().position(|r| r.dev_acc == max).unwrap();
    assert_eq!(out.best_epoch, first);
    for v in &out.best.params {
        assert_eq!(*v, *v as f32 as f64);
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = run(2, Some(2.0));
    let b = run(2, Some(2.0));
    assert_eq!(a.best, b.best);
    assert_eq!(a.history, b.history);
}

#[test]
fn patience_one_halves_every_stalled_epoch() {
    let cfg = TrainConfig {
        patience: 1,
        ..TrainConfig::default()
    };
    let mut s = LrSchedule::new(&cfg);
    assert!(s.observe(0.9));
    let mut lrs = Vec::new();
    for acc in [0.8, 0.7, 0.6, 0.5] {
        assert!(!s.observe(acc));
        lrs.push(s.lr);
    }
    assert_eq!(lrs, vec![5e-4, 2.5e-4, 1.25e-4, 6.25e-5]);
}

#[test]
fn improvement_resets_the_patience_counter() {
    let cfg = TrainConfig {
        patience: 3,
        ..TrainConfig::default()
    };
    let mut s = LrSchedule::new(&cfg);
    for acc in [0.5, 0.4, 0.4, 0.6, 0.6, 0.6] {
        s.observe(acc);
    }
    assert_eq!(s.lr, 1e-3);
    // Equal accuracy is not an improvement.
    s.observe(0.6);
    assert_eq!(s.lr, 5e-4);
}

#[test]
fn perfect_dev_accuracy_ends_training() {
    let h = &toy_outcome().history;
    let first = h.iter().position(|r| r.dev_acc == 1.0);
    if let Some(i) = first {
        assert_eq!(h.len(), i + 1);
    } else {
        assert_eq!(h.len(), 30);
    }
}

#[test]
fn empty_dev_split_is_rejected() {
    let (ds, split) = toy();
    let bad = SplitManifest {
        dev: Vec::new(),
        ..split.clone()
    };
    let m = init_model(spec(), 1).unwrap();
    assert!(train_loop(&TrainConfig::default(), m, ds, &bad).is_err());
}
