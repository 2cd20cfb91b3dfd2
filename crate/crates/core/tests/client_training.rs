//! Client lifecycle on the committed two-class toy fixture.

mod common;

use common::*;
use mmfl_core::client::{argmax, evaluate, ClientState, EvalMode, TrainConfig};
use mmfl_core::completion::{NullProvider, OracleConfig, SyntheticOracle};
use mmfl_core::datagen::{apply_missing, gen_dataset, write_records, DatasetSpec, MultiModalRecord};
use mmfl_core::losses::LossConfig;
use mmfl_core::model::{flatten_params, ClassifierParams, FrozenEncoders, JointModuleParams, ModelConfig, ModelDims};
use mmfl_core::optim::SchedulerMode;
use mmfl_core::Error;

/// Regenerates the toy fixture from its spec. Set `MMFL_REGENERATE_FIXTURES=1`
/// to rewrite the committed files; otherwise the files must match exactly.
#[test]
fn toy_fixture_matches_its_generator() {
    let spec = toy_spec();
    let (train, test) = gen_dataset::<f64>(&spec, TOY_TRAIN_LEN, TOY_TEST_LEN).unwrap();
    let train = apply_missing(&train, 0.3, 0.5, 99).unwrap();
    if std::env::var_os("MMFL_REGENERATE_FIXTURES").is_some() {
        std::fs::create_dir_all(fixture_dir()).unwrap();
        write_records(&fixture_dir().join(TOY_TRAIN), &train).unwrap();
        write_records(&fixture_dir().join(TOY_TEST), &test).unwrap();
    }
    assert_eq!(toy_records(TOY_TRAIN), train);
    assert_eq!(toy_records(TOY_TEST), test);
}

fn toy_dims(spec: &DatasetSpec) -> ModelDims {
    ModelDims::new(&ModelConfig::default(), spec).unwrap()
}

fn toy_client(spec: &DatasetSpec, dims: &ModelDims) -> ClientState<f64> {
    let oracle = SyntheticOracle::new(spec, OracleConfig::default(), 3).unwrap();
    let frozen = FrozenEncoders::new(dims, 17);
    let mut c = ClientState::new(0, toy_records(TOY_TRAIN), dims);
    c.local_preprocess(&oracle, spec, &frozen).unwrap();
    c
}

fn init(dims: &ModelDims, seed: u64) -> Vec<f64> {
    flatten_params(&JointModuleParams::init(dims, seed), &ClassifierParams::init(dims, seed + 1))
}

fn constant_lr() -> TrainConfig {
    TrainConfig { scheduler: SchedulerMode::None, ..TrainConfig::default() }
}

#[test]
fn preprocess_fills_exactly_the_missing_slots() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let raw = toy_records(TOY_TRAIN);
    let missing = raw.iter().filter(|r| !r.is_complete()).count();
    assert_eq!(missing, 12);
    let c = toy_client(&spec, &dims);
    assert!(c.records().iter().all(|r| r.is_complete()));
    let synthetic = c.records().iter().filter(|r| r.image_synthetic || r.text_synthetic).count();
    assert_eq!(synthetic, missing);
    for (before, after) in raw.iter().zip(c.records()) {
        assert_eq!(before.label, after.label);
        if before.is_complete() {
            assert_eq!(before, after);
        }
    }
}

#[test]
fn preprocess_without_missing_data_is_identity() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let complete = toy_records(TOY_TEST)[..20].to_vec();
    let mut c = ClientState::new(0, complete.clone(), &dims);
    let oracle = SyntheticOracle::new(&spec, OracleConfig::default(), 3).unwrap();
    c.local_preprocess(&oracle, &spec, &FrozenEncoders::new(&dims, 1)).unwrap();
    assert_eq!(c.records(), complete.as_slice());
}

#[test]
fn null_provider_leaves_placeholders() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = ClientState::new(0, toy_records(TOY_TRAIN), &dims);
    c.local_preprocess(&NullProvider, &spec, &FrozenEncoders::new(&dims, 1)).unwrap();
    for r in c.records() {
        assert!(r.image.is_some() && r.text.is_some());
        assert!(!r.image_synthetic && !r.text_synthetic);
        if !r.text_present {
            assert!(r.text.as_ref().unwrap().iter().all(|&t| t == spec.placeholder_token()));
        }
    }
    assert_eq!(c.records().iter().filter(|r| !r.is_complete()).count(), 12);
}

#[test]
fn preprocess_runs_once() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    assert!(c.local_preprocess(&NullProvider, &spec, &FrozenEncoders::new(&dims, 17)).is_err());
}

#[test]
fn training_requires_preprocessing() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = ClientState::new(0, toy_records(TOY_TRAIN), &dims);
    assert!(c.local_train(&init(&dims, 1), &dims, &TrainConfig::default(), &LossConfig::default(), 1e-3, 0, 0).is_err());
}

#[test]
fn zero_learning_rate_returns_input_bitwise() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let w = init(&dims, 4);
    let u = c.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 0.0, 0, 9).unwrap();
    assert_eq!(u.params.len(), w.len());
    assert!(u.params.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn training_is_deterministic_and_leaves_data_alone() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let w = init(&dims, 4);
    let mut a = toy_client(&spec, &dims);
    let mut b = toy_client(&spec, &dims);
    let before: Vec<MultiModalRecord<f64>> = a.records().to_vec();
    let ua = a.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 2e-3, 3, 77).unwrap();
    let ub = b.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 2e-3, 3, 77).unwrap();
    assert_eq!(ua, ub);
    assert_eq!(a.records(), before.as_slice());
    let uc = b.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 2e-3, 3, 78).unwrap();
    assert_ne!(ua.params, uc.params);
}

#[test]
fn upload_is_exactly_the_trainable_set() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let u = c.local_train(&init(&dims, 4), &dims, &TrainConfig::default(), &LossConfig::default(), 1e-3, 0, 1).unwrap();
    let joint: usize = JointModuleParams::<f64>::shapes(&dims).iter().map(|(_, r, c)| r * c).sum();
    let cls: usize = ClassifierParams::<f64>::shapes(&dims).iter().map(|(_, r, c)| r * c).sum();
    assert_eq!(u.params.len(), joint + cls);
    assert_eq!(u.num_samples, TOY_TRAIN_LEN);
}

#[test]
fn rejects_wrong_length_globals() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let mut w = init(&dims, 4);
    w.pop();
    assert!(matches!(
        c.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 1e-3, 0, 1),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn non_finite_loss_is_a_numerical_error() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let mut w = init(&dims, 4);
    w[0] = f64::NAN;
    let err = c.local_train(&w, &dims, &TrainConfig::default(), &LossConfig::default(), 1e-3, 0, 1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn toy_loss_decreases_over_five_epochs() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let cfg = TrainConfig { local_epochs: 5, ..constant_lr() };
    let losses = c.epoch_losses(&init(&dims, 4), &dims, &cfg, &LossConfig::default(), 2e-3, 5).unwrap();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "epoch losses {losses:?}");
}

#[test]
fn overfits_and_memorizes() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let cfg = TrainConfig { local_epochs: 40, ..constant_lr() };
    let u = c.local_train(&init(&dims, 4), &dims, &cfg, &LossConfig::default(), 5e-3, 0, 5).unwrap();
    let train = c.records().to_vec();
    assert_eq!(evaluate(&u.params, &dims, &spec, &train, EvalMode::Complete).unwrap(), 1.0);
    assert_eq!(evaluate(&u.params, &dims, &spec, &train[..1], EvalMode::Complete).unwrap(), 1.0);
}

#[test]
fn single_modality_accuracy_does_not_beat_complete() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let mut c = toy_client(&spec, &dims);
    let cfg = TrainConfig { local_epochs: 20, ..constant_lr() };
    let u = c.local_train(&init(&dims, 4), &dims, &cfg, &LossConfig::default(), 5e-3, 0, 5).unwrap();
    let test = toy_records(TOY_TEST);
    let n = test.len() as f64;
    let complete = evaluate(&u.params, &dims, &spec, &test, EvalMode::Complete).unwrap();
    let noise = 3.0 * (complete * (1.0 - complete) / n).sqrt().max(1.0 / n);
    for mode in [EvalMode::ImageOnly, EvalMode::TextOnly] {
        let acc = evaluate(&u.params, &dims, &spec, &test, mode).unwrap();
        assert!(acc <= complete + noise, "{mode:?}: {acc} vs complete {complete}");
    }
}

/// Over random initializations the classifier's output units are exchangeable,
/// so expected accuracy is exactly 1/C; the Monte-Carlo mean over inits must lie
/// within 4 standard errors of it.
#[test]
fn untrained_model_is_at_chance() {
    let spec = DatasetSpec { dataset_seed: 8, ..DatasetSpec::default() };
    let dims = toy_dims(&spec);
    let (_, test) = gen_dataset::<f64>(&spec, 1, 500).unwrap();
    let accs: Vec<f64> = (0..24).map(|s| evaluate(&init(&dims, 100 + 2 * s), &dims, &spec, &test, EvalMode::Complete).unwrap()).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - 0.1).abs() <= 4.0 * se, "mean {mean}, standard error {se}, accuracies {accs:?}");
}

#[test]
fn evaluation_is_deterministic_and_rejects_empty_sets() {
    let spec = toy_spec();
    let dims = toy_dims(&spec);
    let w = init(&dims, 2);
    let test = toy_records(TOY_TEST);
    for mode in EvalMode::ALL {
        assert_eq!(evaluate(&w, &dims, &spec, &test, mode).unwrap(), evaluate(&w, &dims, &spec, &test, mode).unwrap());
    }
    assert!(evaluate(&w, &dims, &spec, &[], EvalMode::Complete).is_err());
}

#[test]
fn argmax_takes_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
    assert_eq!(argmax(&[2.0_f64]), 0);
}
