mod common;

use common::{small_features, small_synth, synthetic_set, tiny_model};
use sv_core::network::checkpoint;
use sv_core::training::{finetune, log_csv, pretrain, TrainError};
use sv_core::{ContrastiveConfig, TrainConfig};

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        crop_duration_s: 0.3,
        crops_per_utterance: 2,
        max_genuine_pairs: 64,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

fn params(m: &sv_core::LstmModel64) -> Vec<u64> {
    m.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let mut m = tiny_model(1, 12, 6, true, Some(3));
    let before = params(&m);
    pretrain(
        &mut m,
        &set,
        &TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        },
    )
    .unwrap();
    assert_eq!(params(&m), before);
    finetune(
        &mut m,
        &set,
        &TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        },
    )
    .unwrap();
    // the head is dropped; the trunk and input norm are untouched
    assert!(m.head().is_none());
    assert_eq!(params(&m), before[..params(&m).len()]);
}

#[test]
fn pretraining_loss_decreases() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let mut m = tiny_model(2, 12, 8, false, None);
    let c = TrainConfig {
        epochs: 12,
        crops_per_utterance: 8,
        learning_rate: 0.1,
        ..cfg()
    };
    let logs = pretrain(&mut m, &set, &c).unwrap();
    let mean = |l: &[sv_core::training::EpochLog]| l.iter().map(|e| e.loss).sum::<f64>() / l.len() as f64;
    let first = mean(&logs[..3]);
    let last = mean(&logs[logs.len() - 3..]);
    assert!(last < first, "{first} -> {last}");
    assert_eq!(m.head().unwrap().num_speakers(), 3);
    assert!(m.input_norm().is_some());
}

#[test]
fn finetuning_separates_speakers() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let mut m = tiny_model(3, 12, 8, false, None);
    pretrain(&mut m, &set, &TrainConfig { epochs: 10, ..cfg() }).unwrap();
    let logs = finetune(
        &mut m,
        &set,
        &TrainConfig {
            epochs: 5,
            learning_rate: 0.01,
            ..cfg()
        },
    )
    .unwrap();
    let last = logs.last().unwrap();
    assert!(last.genuine_mean_distance.unwrap() < last.impostor_mean_distance.unwrap());
    let csv = log_csv(&logs);
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,finetune,"));
}

#[test]
fn training_is_deterministic() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let run = || {
        let mut m = tiny_model(4, 12, 6, false, None);
        pretrain(&mut m, &set, &cfg()).unwrap();
        finetune(&mut m, &set, &cfg()).unwrap();
        checkpoint::encode(&m, &small_features().digest(), &serde_json::json!({})).unwrap()
    };
    assert_eq!(run(), run());
    let mut m = tiny_model(4, 12, 6, false, None);
    pretrain(&mut m, &set, &TrainConfig { seed: 99, ..cfg() }).unwrap();
    finetune(&mut m, &set, &TrainConfig { seed: 99, ..cfg() }).unwrap();
    assert_ne!(
        checkpoint::encode(&m, &small_features().digest(), &serde_json::json!({})).unwrap(),
        run()
    );
}

#[test]
fn infinite_threshold_equals_no_selection() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let run = |c: TrainConfig| {
        let mut m = tiny_model(5, 12, 6, false, None);
        let logs = finetune(&mut m, &set, &c).unwrap();
        (params(&m), logs.iter().map(|l| l.discard_rate).collect::<Vec<_>>())
    };
    let (a, ra) = run(TrainConfig {
        th0: f64::INFINITY,
        ..cfg()
    });
    let (b, _) = run(TrainConfig {
        pair_selection: false,
        ..cfg()
    });
    assert_eq!(a, b);
    assert!(ra.iter().all(|r| *r == Some(0.0)));
}

#[test]
fn weight_decay_shrinks_weights() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let norm = |lambda: f64| {
        let mut m = tiny_model(6, 12, 6, false, None);
        let c = TrainConfig {
            contrastive: ContrastiveConfig { margin: 1.0, lambda },
            ..cfg()
        };
        finetune(&mut m, &set, &c).unwrap();
        m.trunk_weight_sq_norm()
    };
    let start = tiny_model(6, 12, 6, false, None).trunk_weight_sq_norm();
    let heavy = norm(0.5);
    assert!(heavy < norm(0.0));
    assert!(heavy < start);
}

#[test]
fn finetune_needs_two_speakers() {
    let set = synthetic_set(&small_synth(), small_features(), 0..2);
    let one = set.subset(|u| u.speaker == "spk00");
    let mut m = tiny_model(7, 12, 6, false, None);
    assert!(matches!(finetune(&mut m, &one, &cfg()), Err(TrainError::NoData(_))));
    let single = set.subset(|u| u.path.ends_with("0.wav"));
    assert!(matches!(
        finetune(&mut m, &single, &cfg()),
        Err(TrainError::NoGenuinePairs)
    ));
    assert!(matches!(
        finetune(&mut m, &set, &TrainConfig { batch_size: 1, ..cfg() }),
        Err(TrainError::InvalidConfig(_))
    ));
}
