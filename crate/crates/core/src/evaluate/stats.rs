//! Agreement statistics over paired or independent samples.

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn paired(x: &[f64], y: &[f64], need: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(EvalError::Length { x: x.len(), y: y.len() });
    }
    if x.len() < need {
        return Err(EvalError::TooFew { need, got: x.len() });
    }
    Ok(())
}

/// Coefficient of determination of the least-squares line of `y` on `x`.
pub fn r2(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if syy == 0.0 {
        return Err(EvalError::ZeroVariance("y"));
    }
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Ok(0.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    Ok(1.0 - ss_res / syy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub n: usize,
}

/// Mean of `y − x` with limits at ±1.96 sample standard deviations.
pub fn bland_altman(x: &[f64], y: &[f64]) -> Result<BlandAltman> {
    paired(x, y, 2)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).collect();
    let bias = mean(&d);
    let sd = (d.iter().map(|v| (v - bias).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    Ok(BlandAltman {
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
        n: d.len(),
    })
}

fn sorted(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(EvalError::NonFinite);
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Two-sample Kolmogorov-Smirnov statistic, `sup |F_a − F_b|`.
pub fn ks_stat(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("KS sample"));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// `Σ min(p_i, q_i)` over histograms with `bins` equal-width bins spanning
/// both samples.
pub fn overlap_coeff(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("overlap sample"));
    }
    if bins == 0 {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let hist = |x: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in x {
            let k = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            h[k] += 1.0 / x.len() as f64;
        }
        h
    };
    let (p, q) = (hist(a), hist(b));
    Ok(p.iter().zip(&q).map(|(x, y)| x.min(*y)).sum::<f64>().min(1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EvalError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(EvalError::ZeroVariance("y"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / (sxx * syy).sqrt())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the rank-sum identity.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    paired(scores, &vec![0.0; labels.len()], 1)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// `(precision, recall, f1)` of binary predictions.
pub fn precision_recall_f1(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(&p, &t)| p && !t).count() as f64;
    let fneg = pred.iter().zip(truth).filter(|(&p, &t)| !p && t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 };
    (precision, recall, f1)
}
