use hesam_core::{Model, ModelConfig};
use hesam_phantom::dataset::labels_of;
use hesam_phantom::{kfold_split, Sample};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::train::{derive_seed, train, EpochLog, RunRecord, TrainConfig};

fn subset(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Builds a fresh model from `seed` and trains it; the shuffle stream uses
/// the same seed.
pub fn fresh_run(
    config: &ModelConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunRecord> {
    let mut model = Model::<f32>::build(config.clone(), seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    train(&mut model, train_set, Some(test_set), &cfg, on_epoch)
}

/// Stratified `k`-fold cross-validation, retraining from scratch per fold.
///
/// Folds are drawn with `cfg.seed`; fold `f` trains with
/// `derive_seed(cfg.seed, f + 1)`.
pub fn cross_validate(
    config: &ModelConfig,
    samples: &[Sample],
    k: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<RunRecord>> {
    let split = kfold_split(&labels_of(samples), k, cfg.seed)?;
    (0..k)
        .map(|f| {
            let train_set = subset(samples, &split.train_indices(f));
            let test_set = subset(samples, split.test_indices(f));
            let seed = derive_seed(cfg.seed, f as u64 + 1);
            let mut record = fresh_run(config, &train_set, &test_set, cfg, seed, |e| on_epoch(f, e))?;
            record.fold = Some(f);
            Ok(record)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

/// Mean and spread of final test metrics; undefined rates are left out.
pub fn summarize(records: &[RunRecord]) -> RunSummary {
    let metrics: Vec<_> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let collect = |f: &dyn Fn(&crate::Metrics) -> Option<f64>| metrics.iter().filter_map(|m| f(m)).collect::<Vec<_>>();
    RunSummary {
        runs: records.len(),
        accuracy: MeanStd::of(&collect(&|m| Some(m.accuracy))),
        sensitivity: MeanStd::of(&collect(&|m| m.sensitivity)),
        specificity: MeanStd::of(&collect(&|m| m.specificity)),
    }
}
