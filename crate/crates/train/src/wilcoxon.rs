//! Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, TrainError};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// `a` and `b` differ in either direction.
    #[default]
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
    /// `a` tends to fall below `b`.
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// `None` when every difference is zero.
    pub p_value: Option<f64>,
    pub method: Method,
    pub alternative: Alternative,
}

impl WilcoxonResult {
    pub fn is_degenerate(&self) -> bool {
        self.p_value.is_none()
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their
/// positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of `2 W+`: `counts[s]` sign assignments give a doubled
/// positive rank sum of `s`. Doubling keeps average ranks integral.
fn doubled_rank_sum_counts(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

fn tail_p(lower: f64, upper: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::TwoSided => (2.0 * lower.min(upper)).min(1.0),
        Alternative::Greater => upper,
        Alternative::Less => lower,
    }
}

/// Signed-rank test on `a - b`.
///
/// Zero differences are dropped and tied magnitudes share average ranks.
/// Up to [`EXACT_MAX_N`] non-zero pairs the p-value comes from the exact
/// permutation distribution; beyond that from the normal approximation with
/// tie-corrected variance and no continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(TrainError::LengthMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(TrainError::Invalid("wilcoxon inputs must be finite".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    let method = if n <= EXACT_MAX_N { Method::Exact } else { Method::Normal };
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: None,
            method,
            alternative,
        });
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let p = match method {
        Method::Exact => {
            let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
            let counts = doubled_rank_sum_counts(&doubled);
            let observed = (2.0 * w_plus).round() as usize;
            let all = 2f64.powi(n as i32);
            let lower = counts[..=observed].iter().sum::<u64>() as f64 / all;
            let upper = counts[observed..].iter().sum::<u64>() as f64 / all;
            tail_p(lower, upper, alternative)
        }
        Method::Normal => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let mut sorted = ranks.clone();
            sorted.sort_by(f64::total_cmp);
            let mut tie_term = 0.0;
            let mut i = 0;
            while i < sorted.len() {
                let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
                let t = j as f64;
                tie_term += t * t * t - t;
                i += j;
            }
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
            let z = (w_plus - mean) / var.sqrt();
            let std = Normal::standard();
            tail_p(std.cdf(z), std.sf(z), alternative)
        }
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: Some(p),
        method,
        alternative,
    })
}
