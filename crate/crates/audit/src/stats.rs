//! Effect size and rank-sum test for comparing auditor score samples.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("each sample needs at least {need} values, got {a} and {b}")]
    TooFew { need: usize, a: usize, b: usize },
    #[error("pooled standard deviation is zero")]
    ZeroVariance,
    #[error("non-finite value")]
    NonFinite,
}

fn check(a: &[f64], b: &[f64], need: usize) -> Result<(), StatsError> {
    if a.len() < need || b.len() < need {
        return Err(StatsError::TooFew { need, a: a.len(), b: b.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// `(mean_a − mean_b) / pooled_sd`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check(a, b, 2)?;
    let ((ma, va), (mb, vb)) = (mean_var(a), mean_var(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((ma - mb) / pooled)
}

/// Combined samples at or below this size use the exact null distribution.
pub const EXACT_MAX: usize = 12;

/// Doubled mid-ranks of the pooled sample, so tied ranks stay integral.
fn doubled_ranks(a: &[f64], b: &[f64]) -> Vec<u64> {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&i, &j| all[i].total_cmp(&all[j]));
    let mut ranks = vec![0; all.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && all[order[j + 1]] == all[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean; doubled that is i + j + 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon rank-sum p-value. Small samples use the exact
/// permutation distribution of the rank sum (mid-ranks for ties); larger
/// ones the normal approximation with tie-corrected variance and no
/// continuity correction.
pub fn rank_sum_p(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check(a, b, 1)?;
    let ranks = doubled_ranks(a, b);
    let (na, n) = (a.len(), ranks.len());
    let w2: u64 = ranks[..na].iter().sum();
    // doubled expected rank sum
    let e2 = (na * (n + 1)) as u64;
    if n <= EXACT_MAX {
        let obs = w2.abs_diff(e2);
        // counts[k][s]: subsets of size k with doubled rank sum s
        let total: u64 = ranks.iter().sum();
        let mut counts = vec![vec![0u64; total as usize + 1]; na + 1];
        counts[0][0] = 1;
        for &r in &ranks {
            for k in (1..=na).rev() {
                for s in (r as usize..=total as usize).rev() {
                    counts[k][s] += counts[k - 1][s - r as usize];
                }
            }
        }
        let all: u64 = counts[na].iter().sum();
        let extreme: u64 = counts[na]
            .iter()
            .enumerate()
            .filter(|&(s, _)| (s as u64).abs_diff(e2) >= obs)
            .map(|(_, c)| c)
            .sum();
        return Ok(extreme as f64 / all as f64);
    }
    let (na_f, nb_f, n_f) = (na as f64, (n - na) as f64, n as f64);
    let mut ties = std::collections::BTreeMap::<u64, f64>::new();
    for &r in &ranks {
        *ties.entry(r).or_default() += 1.0;
    }
    let tie_term: f64 = ties.values().map(|t| t * t * t - t).sum();
    let var = na_f * nb_f / 12.0 * ((n_f + 1.0) - tie_term / (n_f * (n_f - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w2 as f64 - e2 as f64) / 2.0 / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * normal.cdf(-z.abs())).min(1.0))
}
