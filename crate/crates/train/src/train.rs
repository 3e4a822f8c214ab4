use std::time::Instant;

use hesam_core::model::Mode;
use hesam_core::nn::{sgd_step, SgdConfig};
use hesam_core::{Model, ModelConfig, Tape};
use hesam_phantom::{stack_batch, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::metrics::Metrics;

/// Mixed into the run seed for the mini-batch shuffling stream.
pub const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// `master ^ (tag * golden-ratio constant)`: seeds for folds and repeats.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    /// Seeds the mini-batch order (model initialization is seeded by the caller).
    pub seed: u64,
    /// Evaluate on the test set every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            epochs: 60,
            seed: 0,
            eval_every: 1,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.eval_batch == 0 {
            return Err(TrainError::Invalid("eval_batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub label: String,
    pub seed: u64,
    pub fold: Option<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: Vec<EpochLog>,
    /// Test-set metrics after the last epoch.
    pub metrics: Option<Metrics>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// The record with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_s = 0.0;
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }

    /// One JSON object per epoch, each carrying the run's identifiers.
    pub fn epoch_lines(&self) -> Result<Vec<String>> {
        self.epochs
            .iter()
            .map(|e| {
                let mut v = serde_json::to_value(e)?;
                v["label"] = self.label.clone().into();
                v["seed"] = self.seed.into();
                v["fold"] = serde_json::to_value(self.fold)?;
                Ok(serde_json::to_string(&v)?)
            })
            .collect()
    }
}

fn check_channels(model: &Model<f32>, set: &[Sample]) -> Result<()> {
    let want = model.config().in_channels;
    match set.iter().find(|s| s.channels() != want) {
        Some(s) => Err(TrainError::ChannelMismatch {
            data: s.channels(),
            model: want,
        }),
        None => Ok(()),
    }
}

fn malignant_probability(l0: f32, l1: f32) -> f64 {
    1.0 / (1.0 + (l0 as f64 - l1 as f64).exp())
}

/// Eval-mode metrics over `set`.
pub fn evaluate(model: &Model<f32>, set: &[Sample], batch: usize) -> Result<Metrics> {
    if set.is_empty() {
        return Err(TrainError::Empty("evaluation set"));
    }
    check_channels(model, set)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut probs = Vec::with_capacity(set.len());
    let mut truth = Vec::with_capacity(set.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = stack_batch(set, chunk)?;
        let logits = model.predict_logits(&x)?;
        probs.extend(logits.data().chunks(2).map(|l| malignant_probability(l[0], l[1])));
        truth.extend(y);
    }
    Metrics::from_probabilities(probs, &truth)
}

/// Mini-batch SGD on cross-entropy.
///
/// Batches are drawn from a seeded shuffle of `train` each epoch; the last
/// batch of an epoch may be short. `on_epoch` sees every epoch log as soon
/// as it is complete.
pub fn train(
    model: &mut Model<f32>,
    train: &[Sample],
    test: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training set"));
    }
    check_channels(model, train)?;
    if let Some(t) = test {
        check_channels(model, t)?;
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut last_loss = None;
    let mut metrics = None;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.sgd.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.sgd.batch_size).enumerate() {
            let (x, y) = stack_batch(train, chunk)?;
            let non_finite = |e: hesam_core::Error| match e {
                hesam_core::Error::NonFinite { .. } => TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr,
                    last_loss,
                },
                other => other.into(),
            };
            let mut tape = Tape::new();
            let (trace, bound) = model.run(&mut tape, &x, Mode::Train).map_err(non_finite)?;
            let loss = tape.softmax_cross_entropy(trace.logits, &y).map_err(non_finite)?;
            let value = tape.value(loss).data()[0] as f64;
            tape.backward(loss).map_err(non_finite)?;
            let grads = bound.gradients(&tape);
            sgd_step(model.params_mut(), &grads, &cfg.sgd, epoch)?;

            loss_sum += value * chunk.len() as f64;
            last_loss = Some(value);
            correct += tape
                .value(trace.logits)
                .data()
                .chunks(2)
                .zip(&y)
                .filter(|(l, &t)| usize::from(l[1] > l[0]) == t)
                .count();
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let eval = match test {
            Some(t) if due || last => Some(evaluate(model, t, cfg.eval_batch)?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_loss: eval.as_ref().map(|m| m.loss),
            test_accuracy: eval.as_ref().map(|m| m.accuracy),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
        if last {
            metrics = eval;
        }
    }

    Ok(RunRecord {
        config: model.config().clone(),
        label: model.config().label(),
        seed: cfg.seed,
        fold: None,
        train_size: train.len(),
        test_size: test.map_or(0, <[Sample]>::len),
        epochs: logs,
        metrics,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
