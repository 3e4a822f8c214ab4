//! Central finite-difference verification of the tape's analytic gradients.
//!
//! Every check evaluates a scalar function twice per probed coordinate,
//! `(f(x + eps) - f(x - eps)) / (2 eps)`, using forward passes only, and
//! compares against the gradient the tape produced by its reverse sweep.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, ParamKind};
use crate::tensor::{BnMode, PoolMode, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-3;
/// Denominator floor so exactly-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub probes: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Checks `d sum(r * f(inputs)) / d inputs[i]` for every input flagged
/// differentiable, probing up to `max_probes` random coordinates per input.
pub fn check_function<F>(
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    eps: f64,
    max_probes: usize,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Fixed random projection turns any output into a scalar.
    let eval = |tape: &mut Tape<f64>, vars: &[Var], proj: Option<&Tensor<f64>>| -> Result<(Var, Tensor<f64>)> {
        let out = f(tape, vars)?;
        let shape = tape.value(out).shape().to_vec();
        let r = match proj {
            Some(r) => r.clone(),
            None => Tensor::from_fn(&shape, |i| 0.5 + ((i * 2654435761) % 1000) as f64 / 1000.0),
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        Ok((tape.sum(prod)?, r))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let (root, proj) = eval(&mut tape, &vars, None)?;
    tape.backward(root)?;

    let scalar_at = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let (root, _) = eval(&mut t, &vs, Some(&proj))?;
        Ok(t.value(root).data()[0])
    };

    let mut worst = 0.0f64;
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(rng);
        coords.truncate(max_probes);
        let mut work = inputs.to_vec();
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = scalar_at(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = scalar_at(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[c], numeric));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so a ReLU kink is never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values with pairwise gaps of at least 0.01 so no max is tied
/// within the probe step.
fn tie_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    levels.shuffle(rng);
    Tensor::new(shape, levels).expect("shape matches")
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng, f64, usize) -> Result<(f64, usize)>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", |rng, eps, p| {
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, rng);
            let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, rng);
            let b = uniform(&[4], -1.0, 1.0, rng);
            check_function(&[x, w, b], &[true; 3], eps, p, rng, move |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
            })
        }),
        ("conv_transpose2d", |rng, eps, p| {
            let x = uniform(&[2, 3, 3, 3], -1.0, 1.0, rng);
            let w = uniform(&[3, 2, 2, 2], -1.0, 1.0, rng);
            let b = uniform(&[2], -1.0, 1.0, rng);
            check_function(&[x, w, b], &[true; 3], eps, p, rng, |t, v| {
                t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)
            })
        }),
        ("maxpool2d", |rng, eps, p| {
            let x = tie_free(&[2, 2, 8, 8], rng);
            check_function(&[x], &[true], eps, p, rng, |t, v| t.maxpool2d(v[0], 2, 2))
        }),
        ("avgpool2d", |rng, eps, p| {
            let x = uniform(&[1, 2, 16, 16], -1.0, 1.0, rng);
            check_function(&[x], &[true], eps, p, rng, |t, v| t.avgpool2d(v[0], 5, 2, 0))
        }),
        ("global_pool_avg", |rng, eps, p| {
            let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, rng);
            check_function(&[x], &[true], eps, p, rng, |t, v| t.global_pool(v[0], PoolMode::Avg))
        }),
        ("global_pool_max", |rng, eps, p| {
            let x = tie_free(&[2, 3, 4, 4], rng);
            check_function(&[x], &[true], eps, p, rng, |t, v| t.global_pool(v[0], PoolMode::Max))
        }),
        ("dense", |rng, eps, p| {
            let x = uniform(&[3, 5], -1.0, 1.0, rng);
            let w = uniform(&[5, 4], -1.0, 1.0, rng);
            let b = uniform(&[4], -1.0, 1.0, rng);
            check_function(&[x, w, b], &[true; 3], eps, p, rng, |t, v| t.dense(v[0], v[1], v[2]))
        }),
        ("channel_dense", |rng, eps, p| {
            let x = uniform(&[2, 4, 3, 3], -1.0, 1.0, rng);
            let w = uniform(&[4, 9], -1.0, 1.0, rng);
            let b = uniform(&[4], -1.0, 1.0, rng);
            check_function(&[x, w, b], &[true; 3], eps, p, rng, |t, v| t.channel_dense(v[0], v[1], v[2]))
        }),
        ("relu", |rng, eps, p| {
            let x = away_from_zero(&[2, 3, 4, 4], rng);
            check_function(&[x], &[true], eps, p, rng, |t, v| t.relu(v[0]))
        }),
        ("batchnorm2d_train", |rng, eps, p| {
            let x = uniform(&[3, 2, 3, 3], -1.0, 1.0, rng);
            let g = uniform(&[2], 0.5, 1.5, rng);
            let b = uniform(&[2], -0.5, 0.5, rng);
            check_function(&[x, g, b], &[true; 3], eps, p, rng, |t, v| {
                Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?.0)
            })
        }),
        ("batchnorm2d_eval", |rng, eps, p| {
            let x = uniform(&[3, 2, 3, 3], -1.0, 1.0, rng);
            let g = uniform(&[2], 0.5, 1.5, rng);
            let b = uniform(&[2], -0.5, 0.5, rng);
            let mean = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let var = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
            check_function(&[x, g, b], &[true; 3], eps, p, rng, move |t, v| {
                Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0)
            })
        }),
        ("add", |rng, eps, p| {
            let a = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let b = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            check_function(&[a, b], &[true; 2], eps, p, rng, |t, v| t.add(v[0], v[1]))
        }),
        ("mul", |rng, eps, p| {
            let a = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            let b = uniform(&[2, 3, 4], -1.0, 1.0, rng);
            check_function(&[a, b], &[true; 2], eps, p, rng, |t, v| t.mul(v[0], v[1]))
        }),
        ("concat_channels", |rng, eps, p| {
            let a = uniform(&[2, 3, 2, 2], -1.0, 1.0, rng);
            let b = uniform(&[2, 1, 2, 2], -1.0, 1.0, rng);
            check_function(&[a, b], &[true; 2], eps, p, rng, |t, v| t.concat_channels(v[0], v[1]))
        }),
        ("softmax_cross_entropy", |rng, eps, p| {
            let z = uniform(&[4, 2], -3.0, 3.0, rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
            check_function(&[z], &[true], eps, p, rng, move |t, v| t.softmax_cross_entropy(v[0], &labels))
        }),
        ("class_score_sum", |rng, eps, p| {
            let z = uniform(&[3, 2], -1.0, 1.0, rng);
            let c = rng.random_range(0..2);
            check_function(&[z], &[true], eps, p, rng, move |t, v| t.class_score_sum(v[0], c))
        }),
    ]
}

/// Runs every differentiable op on `instances` random cases each.
pub fn check_ops(seed: u64, instances: usize, eps: f64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, case) in op_cases() {
        let mut worst = 0.0f64;
        let mut probes = 0;
        for _ in 0..instances {
            let (w, p) = case(&mut rng, eps, 24)?;
            worst = worst.max(w);
            probes += p;
        }
        reports.push(CheckReport {
            name: name.to_string(),
            instances,
            probes,
            max_rel_err: worst,
            tolerance,
        });
    }
    Ok(reports)
}

/// Whole-model check: training-mode cross-entropy of a random batch against
/// `samples` randomly chosen trainable scalars.
///
/// With `freeze_kinks` the shifted evaluations keep the relu masks and max
/// winners of the unshifted pass. A step of 1e-3 otherwise flips some of the
/// several hundred thousand relus in the network, and the difference quotient
/// then mixes two linear pieces while backprop sees only one.
pub fn check_model(
    config: ModelConfig,
    seed: u64,
    batch: usize,
    samples: usize,
    eps: f64,
    tolerance: f64,
    freeze_kinks: bool,
) -> Result<CheckReport> {
    let model = Model::<f64>::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x = uniform(&[batch, config.in_channels, 32, 32], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();

    let loss_of = |m: &Model<f64>, mut tape: Tape<f64>, with_grad: bool| -> Result<(Tape<f64>, Var, crate::nn::BoundParams)> {
        let bound = m.params().bind(&mut tape, with_grad);
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, m.params(), &bound, true);
        let trace = m.forward(&mut cx, xv)?;
        let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
        Ok((tape, loss, bound))
    };

    let (mut tape, loss, bound) = loss_of(&model, Tape::recording_kinks(), true)?;
    tape.backward(loss)?;
    let grads = bound.gradients(&tape);
    let pattern = tape.take_kinks().unwrap_or_default();
    let probe_tape = || {
        if freeze_kinks {
            Tape::replaying_kinks(pattern.clone())
        } else {
            Tape::new()
        }
    };

    let trainable: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().get(id).kind == ParamKind::Trainable)
        .collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let id = trainable[rng.random_range(0..trainable.len())];
        let len = model.params().value(id).len();
        let c = rng.random_range(0..len);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
        let orig = model.params().value(id).data()[c];
        probe.params_mut().value_mut(id).data_mut()[c] = orig + eps;
        let (t, l, _) = loss_of(&probe, probe_tape(), false)?;
        let plus = t.value(l).data()[0];
        probe.params_mut().value_mut(id).data_mut()[c] = orig - eps;
        let (t, l, _) = loss_of(&probe, probe_tape(), false)?;
        let minus = t.value(l).data()[0];
        probe.params_mut().value_mut(id).data_mut()[c] = orig;
        worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * eps)));
    }
    Ok(CheckReport {
        name: format!("model[{}]", config.label()),
        instances: 1,
        probes: samples,
        max_rel_err: worst,
        tolerance,
    })
}
