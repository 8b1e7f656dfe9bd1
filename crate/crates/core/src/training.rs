//! Adam with a warmup schedule, the epoch loop with early stopping, and the
//! history CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcasm_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::Dropout;
use crate::model::{batch_loss, build_variant, evaluate, ModelConfig, ModelInput, ModelParams};

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear decay to zero at the last step.
    #[default]
    LinearDecay,
    /// Hold the peak rate.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of all updates spent warming up, in `[0, 1)`.
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; off when unset.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            warmup_fraction: 0.1,
            epochs: 15,
            patience: 5,
            dropout: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            schedule: Schedule::LinearDecay,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.patience == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("patience, batch_size and epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and a positive epsilon".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("max_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Warmup length `w = max(1, ⌈ρN⌉)`, capped at `N`. A relative slack of
/// `1e-9` keeps products like `0.1 · 30` from rounding up past the integer.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    let raw = (fraction * total as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total.max(1))
}

/// Learning rate for update `t` of `total`: `η·t/w` up to the warmup length
/// `w`, then `η·(N−t)/(N−w)` (or `η` for [`Schedule::Constant`]).
pub fn lr_schedule(
    t: usize,
    total: usize,
    fraction: f64,
    peak: f64,
    schedule: Schedule,
) -> Result<f64> {
    if total == 0 {
        return Err(CoreError::Config("schedule needs at least one step".into()));
    }
    if t > total {
        return Err(CoreError::Config(format!(
            "step {t} is past the last step {total}"
        )));
    }
    let w = warmup_steps(total, fraction);
    if t <= w {
        return Ok(peak * (t as f64 / w as f64));
    }
    Ok(match schedule {
        Schedule::LinearDecay => peak * ((total - t) as f64 / (total - w) as f64),
        Schedule::Constant => peak,
    })
}

/// Adam moments, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like<'t>(params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let first: Vec<Tensor> = params
            .into_iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            second_moment: first.clone(),
            first_moment: first,
        }
    }
}

/// One bias-corrected Adam update. `params` and `grads` are parallel
/// slices; the state is lazily sized on the first call.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.first_moment.is_empty() && !params.is_empty() {
        *state = OptimizerState::zeros_like(params.iter().map(|(_, t)| &**t));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(CoreError::Contract(format!(
                "gradient of `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Training(format!(
                "non-finite gradient in `{name}` at flat index {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    for (name, p) in params.iter() {
        if !p.is_finite() {
            return Err(CoreError::Training(format!(
                "parameter `{name}` became non-finite"
            )));
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub train_loss: f64,
    /// `NaN` when there is no dev set, likewise below.
    pub dev_loss: f64,
    pub dev_acc: f64,
    pub dev_f1: f64,
    /// Rate used by the epoch's last update.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,dev_loss,dev_acc,dev_f1,lr";

/// CSV with [`HISTORY_HEADER`], LF line endings and shortest round-trip
/// float formatting.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.dev_loss, r.dev_acc, r.dev_f1, r.lr
        )
        .expect("writing to a string");
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| CoreError::io(path, e))
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the last epoch without a dev set).
    pub params: ModelParams,
    /// Optimizer state saved together with `params`.
    pub optimizer: OptimizerState,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains a freshly initialized model. See [`train_from`].
pub fn train_loop(
    train: &[ModelInput],
    dev: &[ModelInput],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = build_variant(model, config.seed)?;
    train_from(params, train, dev, model, config)
}

/// Mini-batch training from `params`. Each epoch shuffles the training set
/// under the seed, keeps the final partial batch, and then scores the dev
/// set with dropout off. The best epoch is the one with the highest dev
/// accuracy, ties going to the lower dev loss; training stops after
/// `patience` epochs without a new best.
pub fn train_from(
    mut params: ModelParams,
    train: &[ModelInput],
    dev: &[ModelInput],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total = batches_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = OptimizerState::zeros_like(params.named().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, ModelParams, OptimizerState)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let mut dropout = Dropout::new(config.dropout, &mut rng);
                let out = batch_loss(&mut tape, &bound, model, &batch, &mut dropout);
                let out = match out {
                    Err(CoreError::Tensor(e)) => {
                        let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
                        return Err(CoreError::Training(format!(
                            "epoch {epoch}: batch [{}] failed: {e}",
                            ids.join(", ")
                        )));
                    }
                    other => other?,
                };
                let loss = tape.value(out.loss).item().unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
                    return Err(CoreError::Training(format!(
                        "epoch {epoch}: non-finite loss on batch [{}]",
                        ids.join(", ")
                    )));
                }
                let grads = tape.backward(out.loss)?;
                let flat: Vec<Tensor> = bound
                    .named()
                    .into_iter()
                    .map(|(_, &v)| {
                        grads
                            .get(v)
                            .cloned()
                            .expect("bound parameters have gradients")
                    })
                    .collect();
                (loss, flat)
            };
            if let Some(c) = config.max_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            lr = lr_schedule(
                optimizer.step as usize + 1,
                total,
                config.warmup_fraction,
                config.learning_rate,
                config.schedule,
            )?;
            adam_step(&mut params.named_mut(), &grads, &mut optimizer, lr, config)?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / batches_per_epoch as f64;

        let (dev_loss, dev_acc, dev_f1) = if dev.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let eval = evaluate(&params, model, dev)?;
            let m = eval
                .metrics
                .ok_or_else(|| CoreError::Data("every dev sample needs a label".into()))?;
            (eval.loss, m.accuracy, m.f1)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_acc,
            dev_f1,
            lr,
        });

        if dev.is_empty() {
            best = Some((dev_acc, dev_loss, epoch, params.clone(), optimizer.clone()));
            continue;
        }
        let improved = match &best {
            None => true,
            Some((acc, loss, ..)) => dev_acc > *acc || (dev_acc == *acc && dev_loss < *loss),
        };
        if improved {
            best = Some((dev_acc, dev_loss, epoch, params.clone(), optimizer.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch < config.epochs;
                break;
            }
        }
    }

    let (_, _, best_epoch, params, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        optimizer,
        best_epoch,
        history,
        stopped_early,
    })
}
