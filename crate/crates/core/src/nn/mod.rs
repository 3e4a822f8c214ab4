//! Parameter registry, layer blocks, SGD and checkpoint I/O.

pub mod checkpoint;
pub mod layers;
mod params;
pub mod sgd;

pub use params::{init, BoundParams, Gradients, Param, ParamId, ParamKind, ParamSet};
pub use sgd::{sgd_step, SgdConfig};

use crate::scalar::Scalar;
use crate::tensor::{BatchStats, Tape};

/// State threaded through one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamSet<T>,
    pub bound: &'a BoundParams,
    /// Batch norm uses batch statistics and queues running-stat updates.
    pub training: bool,
    pub bn_updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, bound: &'a BoundParams, training: bool) -> Self {
        Self {
            tape,
            params,
            bound,
            training,
            bn_updates: Vec::new(),
        }
    }
}

/// Blends queued batch statistics into running buffers:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<T: Scalar>(ps: &mut ParamSet<T>, updates: Vec<(ParamId, ParamId, BatchStats<T>)>) {
    let m = T::from_f64_lossy(layers::BN_MOMENTUM);
    let keep = T::one() - m;
    for (mean_id, var_id, stats) in updates {
        for (r, &b) in ps.value_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in ps.value_mut(var_id).data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}
