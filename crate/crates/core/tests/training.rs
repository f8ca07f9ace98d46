use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use voxseg::data::{make_split, LabelMap, Volume};
use voxseg::nn::{ModelConfig, Variant};
use voxseg::synth::{gen_dataset, SynthSpec};
use voxseg::train::{
    cross_validate, evaluate, predict_labels, AdamState, CaseSet, Checkpoint, PlateauTracker, PreparedCase, TrainConfig,
    Trainer,
};
use voxseg::{Error, Tensor};

const DIMS: [usize; 3] = [16; 3];

fn model_config() -> ModelConfig {
    ModelConfig::default().with_base_channels(8).with_variant(Variant::Proposed)
}

fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        input_dims: DIMS,
        ..TrainConfig::default()
    }
}

fn cases(count: usize, seed: u64) -> CaseSet {
    let spec = SynthSpec {
        dims: DIMS,
        seed,
        ..SynthSpec::default()
    };
    CaseSet::new(gen_dataset(&spec, count).unwrap()).unwrap()
}

fn prepared(set: &CaseSet) -> Vec<PreparedCase> {
    set.prepare(&set.ids(), DIMS).unwrap()
}

fn history_bits(t: &Trainer) -> Vec<[u64; 3]> {
    t.history
        .iter()
        .map(|r| [r.train_loss.to_bits(), r.val_loss.to_bits(), r.lr.to_bits()])
        .collect()
}

#[test]
fn smoke_run_lowers_the_training_loss() {
    let set = cases(2, 1);
    let data = prepared(&set);
    let mut t = Trainer::new(model_config(), train_config(30, 0)).unwrap();
    t.fit(&data, &[], |_, _, _| Ok(())).unwrap();
    assert_eq!(t.history.len(), 30);
    assert!(t.history.iter().all(|r| r.train_loss > 0.0 && r.val_loss > 0.0));
    let (first, last) = (t.history[0].train_loss, t.history[29].train_loss);
    assert!(last < first, "{first} -> {last}");
    assert_eq!(t.adam.t, 30);
}

#[test]
fn training_is_deterministic() {
    let set = cases(4, 2);
    let data = prepared(&set);
    let run = || {
        let mut t = Trainer::new(model_config(), train_config(3, 5)).unwrap();
        t.fit(&data[..3], &data[3..], |_, _, _| Ok(())).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(history_bits(&a), history_bits(&b));
    assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());

    let mut other = Trainer::new(model_config(), train_config(3, 6)).unwrap();
    other.fit(&data[..3], &data[3..], |_, _, _| Ok(())).unwrap();
    assert_ne!(history_bits(&a), history_bits(&other));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let set = cases(4, 3);
    let data = prepared(&set);
    let (train, val) = data.split_at(3);
    let mut straight = Trainer::new(model_config(), train_config(4, 1)).unwrap();
    straight.fit(train, val, |_, _, _| Ok(())).unwrap();

    let mut first = Trainer::new(model_config(), train_config(2, 1)).unwrap();
    first.fit(train, val, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), train_config(4, 1)).unwrap();
    resumed.fit(train, val, |_, _, _| Ok(())).unwrap();

    assert_eq!(history_bits(&straight), history_bits(&resumed));
    assert_eq!(
        straight.checkpoint().to_bytes().unwrap(),
        resumed.checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn checkpoint_file_round_trip_is_byte_exact() {
    let set = cases(2, 4);
    let mut t = Trainer::new(model_config(), train_config(1, 0)).unwrap();
    t.fit(&prepared(&set), &[], |_, _, _| Ok(())).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let again = dir.path().join("b.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'Z';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    let mut short = ck.to_bytes().unwrap();
    short.truncate(short.len() - 3);
    assert!(Checkpoint::from_bytes(&short).is_err());
}

#[test]
fn history_learning_rates_replay_from_the_validation_column() {
    let set = cases(4, 5);
    let data = prepared(&set);
    let config = TrainConfig {
        plateau_patience: 1,
        plateau_factor: 0.5,
        ..train_config(8, 2)
    };
    let mut t = Trainer::new(model_config(), config.clone()).unwrap();
    t.fit(&data[..2], &data[2..], |_, _, _| Ok(())).unwrap();
    let val: Vec<f64> = t.history.iter().map(|r| r.val_loss).collect();
    let lrs: Vec<f64> = t.history.iter().map(|r| r.lr).collect();
    let replay = PlateauTracker::replay(config.lr, config.plateau_patience, config.plateau_factor, config.min_lr, &val);
    assert_eq!(lrs, replay);
    assert_eq!(t.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
}

#[test]
fn scripted_stall_reduces_the_rate_exactly_once() {
    let mut losses = vec![1.0, 0.9, 0.8];
    losses.extend([0.8; 10]);
    let lrs = PlateauTracker::replay(5e-4, 10, 0.1, 1e-7, &losses);
    // the rate in effect during each epoch; the cut applies after the tenth stalled epoch
    assert!(lrs.iter().all(|&lr| lr == 5e-4));
    let mut t = PlateauTracker::new(5e-4, 10, 0.1, 1e-7);
    let mut cuts = 0;
    for &v in &losses {
        let before = t.current_lr;
        t.update(v);
        if t.current_lr != before {
            cuts += 1;
        }
    }
    assert_eq!(cuts, 1);
    assert!((t.current_lr - 5e-5).abs() < 1e-18);
}

#[test]
fn nan_input_aborts_with_a_diagnostic() {
    let set = cases(2, 6);
    let mut batch = set.select(&set.ids()).unwrap();
    batch[1].0.data[7] = f32::NAN;
    let mut t = Trainer::new(model_config(), train_config(1, 0)).unwrap();
    match t.step(&batch) {
        Err(Error::Numerical { epoch, lr, case_id, .. }) => {
            assert_eq!(epoch, 0);
            assert_eq!(lr, 5e-4);
            assert!(case_id.contains(&batch[1].0.id));
        }
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn cross_validation_covers_every_case_once() {
    // 20 cases: 2 held out for testing, 18 dealt into nine folds of two
    let set = cases(20, 7);
    let split = make_split(&set.ids(), 11).unwrap();
    let report = cross_validate(&model_config(), &train_config(1, 0), &set, &split).unwrap();
    assert_eq!(report.folds.len(), 9);
    let mut seen = BTreeSet::new();
    for f in &report.folds {
        assert_eq!((f.train_cases, f.val_ids.len()), (16, 2));
        for id in &f.val_ids {
            assert!(seen.insert(id.clone()));
            assert!(!split.test_ids.contains(id));
        }
        for v in [f.metrics.dsc, f.metrics.ji, f.metrics.nsd] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(seen.len(), 18);
    let mean = report.folds.iter().map(|f| f.metrics.dsc).sum::<f64>() / 9.0;
    assert!((report.mean.dsc - mean).abs() < 1e-12);
    let mean_loss = report.folds.iter().map(|f| f.best_val_loss).sum::<f64>() / 9.0;
    assert!((report.mean_best_val_loss - mean_loss).abs() < 1e-12);
}

#[test]
fn untrained_evaluation_is_total_and_repeatable() {
    let t = Trainer::new(model_config(), train_config(1, 0)).unwrap();
    let set = cases(2, 8);
    let raw = set.select(&set.ids()).unwrap();
    let a = evaluate(&t.model, &raw).unwrap();
    assert_eq!(a, evaluate(&t.model, &raw).unwrap());
    for r in &a {
        for m in r.per_class.values().chain([&r.mean_foreground]) {
            assert!([m.dsc, m.ji, m.nsd].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn prediction_keeps_the_original_grid() {
    let t = Trainer::new(model_config(), train_config(1, 0)).unwrap();
    let dims = [20, 18, 17];
    let n: usize = dims.iter().product();
    let v = Volume::new("odd", dims, [1.0, 1.2, 0.9], (0..n).map(|i| (i % 13) as f32).collect()).unwrap();
    let l: LabelMap = predict_labels(&t.model, &v).unwrap();
    assert_eq!((l.dims, l.spacing, l.id.as_str()), (dims, v.spacing, "odd"));
    assert!(l.labels.iter().all(|&c| c < 3));
}

#[test]
fn bad_configs_are_rejected() {
    let bad = [
        TrainConfig { lr: 0.0, ..train_config(1, 0) },
        TrainConfig { plateau_factor: 1.0, ..train_config(1, 0) },
        TrainConfig { folds: 5, ..train_config(1, 0) },
        TrainConfig { input_dims: [16, 16, 20], ..train_config(1, 0) },
        TrainConfig { batch_size: 0, ..train_config(1, 0) },
    ];
    for c in bad {
        assert!(matches!(Trainer::new(model_config(), c), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn first_adam_step_ignores_gradient_scale(
        g in proptest::collection::vec(prop_oneof![-1e2f32..-1e-2, 1e-2f32..1e2], 1..20),
        scale in 1e-2f32..1e2,
    ) {
        let step = |grad: &[f32]| {
            let mut params = BTreeMap::from([("w".to_string(), Tensor::zeros(&[grad.len()]))]);
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![grad.len()], grad.to_vec()).unwrap())]);
            let mut adam = AdamState::for_params(&params);
            adam.step(&mut params, &grads, 5e-4).unwrap();
            prop_assert!(adam.v["w"].iter().all(|&v| v >= 0.0));
            Ok(params["w"].data().to_vec())
        };
        let a = step(&g)?;
        let scaled: Vec<f32> = g.iter().map(|x| x * scale).collect();
        let b = step(&scaled)?;
        for ((x, y), gi) in a.iter().zip(&b).zip(&g) {
            prop_assert_eq!(x.signum(), -gi.signum());
            prop_assert!((x - y).abs() <= 1e-6 * 5e-4 + 1e-12, "{} vs {}", x, y);
            prop_assert!((x.abs() - 5e-4).abs() < 1e-6 * 5e-4 + 1e-9);
        }
    }
}
