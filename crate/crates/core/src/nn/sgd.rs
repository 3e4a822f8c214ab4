use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Plain SGD with coupled L2 weight decay and a step-decay schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    /// Multiplier applied at each `decay_period` boundary.
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_period: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            decay_factor: 0.1,
            decay_period: 30,
            weight_decay: 0.0001,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay_period must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr * decay_factor ^ floor(epoch / decay_period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_period) as i32;
        self.lr * self.decay_factor.powi(steps)
    }
}

/// `p <- p - lr(epoch) * (g + weight_decay * p)` for every trainable parameter.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    config: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let p = params.get(id);
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let g = grads
            .get(id)
            .ok_or_else(|| Error::Usage(format!("missing gradient for {}", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Usage(format!("gradient shape mismatch for {}", p.name)));
        }
    }
    let lr = T::from_f64_lossy(config.lr_at(epoch));
    let wd = T::from_f64_lossy(config.weight_decay);
    for id in ids {
        if params.get(id).kind != ParamKind::Trainable {
            continue;
        }
        let g = grads.get(id).expect("checked above");
        let value = params.value_mut(id);
        for (p, &d) in value.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * (d + wd * *p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(p: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("p", ParamKind::Trainable, Tensor::scalar(p)).unwrap();
        ps
    }

    #[test]
    fn schedule_decays_by_ten_every_thirty_epochs() {
        let c = SgdConfig::default();
        assert_eq!(c.lr_at(0), 0.0005);
        assert_eq!(c.lr_at(29), 0.0005);
        assert!((c.lr_at(30) - 0.00005).abs() < 1e-18);
        assert!((c.lr_at(60) - 0.000005).abs() < 1e-18);
    }

    #[test]
    fn scalar_step_arithmetic() {
        let mut ps = single(1.0);
        let g = Gradients::from_vec(vec![Some(Tensor::scalar(1.0))]);
        let cfg = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_step(&mut ps, &g, &cfg, 0).unwrap();
        assert!((ps.by_name("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = single(0.37);
        let g = Gradients::from_vec(vec![Some(Tensor::scalar(0.0))]);
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_step(&mut ps, &g, &cfg, 5).unwrap();
        assert_eq!(ps.by_name("p").unwrap().data()[0], 0.37);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut ps = single(1.0);
        let g = Gradients::from_vec(vec![None]);
        assert!(matches!(
            sgd_step(&mut ps, &g, &SgdConfig::default(), 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut ps = single(1.0);
        ps.insert("running", ParamKind::Buffer, Tensor::scalar(3.0)).unwrap();
        let g = Gradients::from_vec(vec![Some(Tensor::scalar(1.0)), None]);
        sgd_step(&mut ps, &g, &SgdConfig::default(), 0).unwrap();
        assert_eq!(ps.by_name("running").unwrap().data()[0], 3.0);
    }

    #[test]
    fn quadratic_loss_strictly_decreases_below_curvature_bound() {
        // f(p) = a/2 p^2, curvature a; any lr < 2/a contracts.
        let a = 4.0;
        for &lr in &[0.01, 0.1, 0.45] {
            let mut ps = single(1.3);
            let before = 0.5 * a * 1.3f64 * 1.3;
            let g = Gradients::from_vec(vec![Some(Tensor::scalar(a * 1.3))]);
            let cfg = SgdConfig {
                lr,
                weight_decay: 0.0,
                ..SgdConfig::default()
            };
            sgd_step(&mut ps, &g, &cfg, 0).unwrap();
            let p = ps.by_name("p").unwrap().data()[0];
            assert!(0.5 * a * p * p < before, "lr {lr}");
        }
    }

    #[test]
    fn zero_weight_decay_is_bitwise_vanilla_sgd() {
        let vals = [0.123456789f64, -3.5, 1e-7, 42.0];
        let grads = [0.3f64, -0.77, 5.5, 1e-9];
        let mut ps = ParamSet::new();
        ps.insert("w", ParamKind::Trainable, Tensor::new(&[4], vals.to_vec()).unwrap())
            .unwrap();
        let g = Gradients::from_vec(vec![Some(Tensor::new(&[4], grads.to_vec()).unwrap())]);
        let cfg = SgdConfig {
            lr: 0.0173,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_step(&mut ps, &g, &cfg, 0).unwrap();
        for i in 0..4 {
            let want = vals[i] - 0.0173 * grads[i];
            assert_eq!(ps.by_name("w").unwrap().data()[i].to_bits(), want.to_bits());
        }
    }
}
