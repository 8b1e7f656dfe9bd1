use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcasm_core::checkpoint::Checkpoint;
use sarcasm_core::data::{load_inputs, synth_dataset, Split, SynthConfig};
use sarcasm_core::encoders::Vocab;
use sarcasm_core::model::{evaluate, ModelConfig, ModelInput, Variant};
use sarcasm_core::training::{
    adam_step, clip_grad_norm, history_csv, lr_schedule, train_loop, warmup_steps, OptimizerState,
    Schedule, TrainConfig, HISTORY_HEADER,
};
use sarcasm_core::verify::{random_batch, small_model_config};
use sarcasm_core::CoreError;
use sarcasm_tensor::Tensor;

fn scalar_step(
    theta: &mut Tensor,
    g: f64,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) {
    let mut params = [("theta".to_string(), theta)];
    adam_step(&mut params, &[Tensor::scalar(g)], state, lr, config).unwrap();
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let config = TrainConfig::default();
    for (theta0, g, lr) in [(0.3, 2.5, 1e-3), (-1.0, -0.01, 0.1), (5.0, 1e3, 2e-5)] {
        let mut theta = Tensor::scalar(theta0);
        let mut state = OptimizerState::default();
        scalar_step(&mut theta, g, &mut state, lr, &config);
        let delta = theta.item().unwrap() - theta0;
        assert!((delta + lr * f64::signum(g)).abs() <= lr * 1e-6, "{delta}");
        assert_eq!(state.step, 1);
    }
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let config = TrainConfig::default();
    let mut theta = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.0]).unwrap();
    let before = theta.clone();
    let mut state = OptimizerState::default();
    for _ in 0..5 {
        let mut params = [("w".to_string(), &mut theta)];
        adam_step(
            &mut params,
            &[Tensor::zeros(vec![2, 2])],
            &mut state,
            0.1,
            &config,
        )
        .unwrap();
    }
    assert_eq!(theta, before);
}

#[test]
fn adam_minimizes_a_parabola_like_a_scalar_simulation() {
    let config = TrainConfig::default();
    let mut theta = Tensor::scalar(1.0);
    let mut state = OptimizerState::default();
    // independent scalar Adam
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * theta.item().unwrap();
        scalar_step(&mut theta, g, &mut state, 0.1, &config);
        let gx = 2.0 * x;
        m = 0.9 * m + 0.1 * gx;
        v = 0.999 * v + 0.001 * gx * gx;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta.item().unwrap() - x).abs() < 1e-12);
    }
    assert!(theta.item().unwrap().abs() < 0.1, "{theta:?}");
}

#[test]
fn adam_rejects_mismatched_or_non_finite_gradients() {
    let config = TrainConfig::default();
    let mut theta = Tensor::scalar(1.0);
    let mut state = OptimizerState::default();
    let mut params = [("theta".to_string(), &mut theta)];
    let err = adam_step(
        &mut params,
        &[Tensor::scalar(f64::NAN)],
        &mut state,
        0.1,
        &config,
    )
    .unwrap_err();
    assert!(
        matches!(&err, CoreError::Training(m) if m.contains("theta")),
        "{err}"
    );
    assert!(matches!(
        adam_step(
            &mut params,
            &[Tensor::zeros(vec![2])],
            &mut state,
            0.1,
            &config
        ),
        Err(CoreError::Contract(_))
    ));
    assert!(adam_step(&mut params, &[], &mut state, 0.1, &config).is_err());
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut grads = vec![
        Tensor::vector(vec![3.0, 0.0]),
        Tensor::vector(vec![0.0, 4.0]),
    ];
    let norm = clip_grad_norm(&mut grads, 1.0);
    assert_eq!(norm, 5.0);
    let total: f64 = grads.iter().map(|g| g.sum_squares()).sum();
    assert!((total.sqrt() - 1.0).abs() < 1e-12);
    let mut small = vec![Tensor::vector(vec![0.1])];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), [0.1]);
}

#[test]
fn schedule_hits_its_landmarks_exactly() {
    let eta = 3e-4;
    let lr = |t| lr_schedule(t, 100, 0.1, eta, Schedule::LinearDecay).unwrap();
    assert_eq!(warmup_steps(100, 0.1), 10);
    assert_eq!(lr(10), eta);
    assert_eq!(lr(5), eta / 2.0);
    assert_eq!(lr(55), eta * 45.0 / 90.0);
    assert_eq!(lr(55), eta / 2.0);
    assert_eq!(lr(100), 0.0);
    assert_eq!(lr(0), 0.0);
}

#[test]
fn schedule_rises_then_falls() {
    let (n, w) = (37, warmup_steps(37, 0.1));
    let values: Vec<f64> = (1..=n)
        .map(|t| lr_schedule(t, n, 0.1, 1.0, Schedule::LinearDecay).unwrap())
        .collect();
    assert!(values[..w].windows(2).all(|p| p[0] < p[1]));
    assert!(values[w - 1..].windows(2).all(|p| p[0] > p[1]));
    let flat: Vec<f64> = (w..=n)
        .map(|t| lr_schedule(t, n, 0.1, 1.0, Schedule::Constant).unwrap())
        .collect();
    assert!(flat.iter().all(|&v| v == 1.0));
    assert!(lr_schedule(n + 1, n, 0.1, 1.0, Schedule::LinearDecay).is_err());
}

fn small_setup(n: usize) -> (ModelConfig, Vec<ModelInput>, Vec<ModelInput>) {
    let config = small_model_config(Variant::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train = random_batch(&mut rng, &config, n);
    let dev = random_batch(&mut rng, &config, 4);
    (config, train, dev)
}

#[test]
fn patience_stops_when_dev_cannot_improve() {
    let (model, train, mut dev) = small_setup(6);
    dev.iter_mut().for_each(|d| d.label = Some(1));
    let config = TrainConfig {
        learning_rate: 0.0,
        patience: 1,
        epochs: 10,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &dev, &model, &config).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.stopped_early);
    assert_eq!(outcome.best_epoch, 1);
    assert_eq!(outcome.history[0].dev_acc, outcome.history[1].dev_acc);
}

#[test]
fn same_seed_same_history_bits() {
    let (model, train, dev) = small_setup(10);
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 4,
        batch_size: 3,
        dropout: 0.2,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train_loop(&train, &dev, &model, &config).unwrap();
    let b = train_loop(&train, &dev, &model, &config).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    let bits = |o: &sarcasm_core::training::TrainOutcome| -> Vec<u64> {
        o.history
            .iter()
            .flat_map(|r| [r.train_loss.to_bits(), r.dev_loss.to_bits(), r.lr.to_bits()])
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.params, b.params);

    let other = TrainConfig { seed: 6, ..config };
    let c = train_loop(&train, &dev, &model, &other).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn returned_parameters_are_the_best_epoch() {
    let (model, train, dev) = small_setup(12);
    let config = TrainConfig {
        learning_rate: 2e-2,
        epochs: 6,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &dev, &model, &config).unwrap();
    let best = &outcome.history[outcome.best_epoch - 1];
    let top = outcome
        .history
        .iter()
        .map(|r| r.dev_acc)
        .fold(f64::MIN, f64::max);
    assert_eq!(best.dev_acc, top);
    let eval = evaluate(&outcome.params, &model, &dev).unwrap();
    assert_eq!(eval.loss.to_bits(), best.dev_loss.to_bits());
    assert_eq!(eval.metrics.unwrap().accuracy, best.dev_acc);

    let csv = history_csv(&outcome.history);
    assert_eq!(csv.lines().next(), Some(HISTORY_HEADER));
    assert_eq!(csv.lines().count(), outcome.history.len() + 1);
}

#[test]
fn empty_dev_keeps_the_last_epoch() {
    let (model, train, _) = small_setup(5);
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 3,
        patience: 1,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &[], &model, &config).unwrap();
    assert_eq!((outcome.history.len(), outcome.best_epoch), (3, 3));
    assert!(outcome
        .history
        .iter()
        .all(|r| r.dev_acc.is_nan() && r.dev_loss.is_nan()));
    assert!(matches!(
        train_loop(&[], &[], &model, &config),
        Err(CoreError::Data(_))
    ));
}

#[test]
fn learning_rate_reaches_zero_on_the_final_update() {
    let (model, train, _) = small_setup(8);
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 3,
        batch_size: 3,
        patience: 10,
        ..TrainConfig::default()
    };
    // without a dev set the final epoch, and its optimizer state, is kept
    let outcome = train_loop(&train, &[], &model, &config).unwrap();
    assert_eq!(outcome.optimizer.step, 9);
    assert_eq!(outcome.history.last().unwrap().lr, 0.0);
}

fn synthetic_inputs() -> (ModelConfig, Vocab, [Vec<ModelInput>; 3]) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&SynthConfig::default(), dir.path()).unwrap();
    let texts = manifest.split(Split::Train);
    let vocab = Vocab::build(
        texts
            .iter()
            .flat_map(|s| [s.text.as_str(), s.caption.as_str()]),
        None,
    );
    let mut model = ModelConfig {
        d: 16,
        heads: 2,
        regions: 4,
        region_dim: 8,
        ..ModelConfig::default()
    };
    model.encoder.text_len = 6;
    model.encoder.caption_len = 4;
    model.encoder.vocab_size = vocab.len();
    let load =
        |split| load_inputs(&manifest, &manifest.split(split), Some(&vocab), &model).unwrap();
    let inputs = [load(Split::Train), load(Split::Dev), load(Split::Test)];
    (model, vocab, inputs)
}

#[test]
fn synthetic_set_is_learned() {
    let (model, _, [train, dev, _]) = synthetic_inputs();
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 50,
        patience: 50,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &dev, &model, &config).unwrap();
    let acc = evaluate(&outcome.params, &model, &train)
        .unwrap()
        .metrics
        .unwrap()
        .accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn checkpoints_round_trip_exactly() {
    let (model, vocab, [train, dev, test]) = synthetic_inputs();
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 2,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &dev, &model, &config).unwrap();
    let before = evaluate(&outcome.params, &model, &test).unwrap();
    let ckpt = Checkpoint {
        model: model.clone(),
        train: config,
        vocab: Some(vocab),
        params: outcome.params,
        optimizer: outcome.optimizer,
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(loaded.params, ckpt.params);
    assert_eq!(loaded.optimizer, ckpt.optimizer);
    assert_eq!(loaded.vocab, ckpt.vocab);
    let after = evaluate(&loaded.params, &loaded.model, &test).unwrap();
    assert_eq!(before.loss.to_bits(), after.loss.to_bits());
    assert_eq!(before.predictions, after.predictions);
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let (model, train, dev) = small_setup(4);
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let outcome = train_loop(&train, &dev, &model, &config).unwrap();
    let bytes = Checkpoint {
        model,
        train: config,
        vocab: None,
        params: outcome.params,
        optimizer: outcome.optimizer,
    }
    .to_bytes()
    .unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());

    let mut cases: Vec<Vec<u8>> = vec![
        bytes[..bytes.len() - 1].to_vec(),
        bytes[..20].to_vec(),
        Vec::new(),
    ];
    let mut longer = bytes.clone();
    longer.push(0);
    cases.push(longer);
    let mut magic = bytes.clone();
    magic[0] = b'X';
    cases.push(magic);
    let mut version = bytes.clone();
    version[4] = 99;
    cases.push(version);
    for case in cases {
        let err = Checkpoint::from_bytes(&case).unwrap_err();
        assert!(matches!(err, CoreError::Checkpoint(_)), "{err}");
    }
}
