use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Malignant (class 1) is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(TrainError::LengthMismatch(predicted.len(), truth.len()));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `TP / (TP + FN)`; `None` without malignant samples.
    pub sensitivity: Option<f64>,
    /// `TN / (TN + FP)`; `None` without benign samples.
    pub specificity: Option<f64>,
    pub confusion: Confusion,
    /// Mean cross-entropy of the true class.
    pub loss: f64,
    /// Malignant-class probability per sample, in set order.
    pub probabilities: Vec<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    /// Metrics of argmax predictions from malignant-class probabilities.
    /// A probability of exactly one half predicts benign.
    pub fn from_probabilities(probabilities: Vec<f64>, truth: &[usize]) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(TrainError::Empty("evaluation set"));
        }
        let predicted: Vec<usize> = probabilities.iter().map(|&p| usize::from(p > 0.5)).collect();
        let confusion = Confusion::from_predictions(&predicted, truth)?;
        let loss = probabilities
            .iter()
            .zip(truth)
            .map(|(&p, &t)| {
                let q = if t == 1 { p } else { 1.0 - p };
                -q.max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / truth.len() as f64;
        Ok(Self::from_confusion(confusion, loss, probabilities))
    }

    pub fn from_confusion(confusion: Confusion, loss: f64, probabilities: Vec<f64>) -> Self {
        let c = confusion;
        Self {
            accuracy: (c.tp + c.tn) as f64 / c.total().max(1) as f64,
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            confusion,
            loss,
            probabilities,
        }
    }

    /// `accuracy=... sensitivity=... specificity=... tp=... tn=... fp=... fn=... loss=...`
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let c = &self.confusion;
        format!(
            "accuracy={:.6} sensitivity={} specificity={} tp={} tn={} fp={} fn={} n={} loss={:.6}",
            self.accuracy,
            opt(self.sensitivity),
            opt(self.specificity),
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            c.total(),
            self.loss
        )
    }
}
