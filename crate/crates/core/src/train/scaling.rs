//! IsoFLOP parabolas and log-log power laws for compute-optimal sizing.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("budget {budget:e}: need at least {need} points with distinct sizes, got {got}")]
    TooFewPoints { budget: f64, need: usize, got: usize },
    #[error("budget {0:e}: no interior minimum (curvature is not positive)")]
    NoInteriorMinimum(f64),
    #[error("non-positive or non-finite value {0}")]
    NonPositive(f64),
    #[error("degenerate inputs: {0}")]
    Degenerate(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoflopPoint {
    pub flop_budget: f64,
    pub param_count: f64,
    pub val_loss: f64,
}

/// `val_loss ≈ a·x² + b·x + c` with `x = ln(param_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoflopFit {
    pub flop_budget: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub log_argmin: f64,
    pub argmin_params: f64,
    pub min_loss: f64,
}

/// `ln y ≈ slope·ln x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Approximate training compute, 6 FLOPs per parameter per token.
pub fn training_flops(params: f64, tokens: f64) -> f64 {
    6.0 * params * tokens
}

fn positive(x: f64) -> Result<f64, FitError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(FitError::NonPositive(x))
    }
}

fn least_squares(design: DMatrix<f64>, y: DVector<f64>) -> Option<DVector<f64>> {
    let cols = design.ncols();
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.rank(smax * 1e-10) < cols {
        return None;
    }
    svd.solve(&y, 0.0).ok()
}

/// Fits one parabola per FLOP budget, in ascending budget order.
pub fn fit_isoflop(points: &[IsoflopPoint]) -> Result<Vec<IsoflopFit>, FitError> {
    let mut groups: BTreeMap<u64, Vec<&IsoflopPoint>> = BTreeMap::new();
    for p in points {
        positive(p.flop_budget)?;
        positive(p.param_count)?;
        positive(p.val_loss)?;
        // positive floats order the same as their bit patterns
        groups.entry(p.flop_budget.to_bits()).or_default().push(p);
    }
    if groups.is_empty() {
        return Err(FitError::Degenerate("no points"));
    }
    groups
        .into_iter()
        .map(|(bits, pts)| {
            let budget = f64::from_bits(bits);
            let xs: Vec<f64> = pts.iter().map(|p| p.param_count.ln()).collect();
            let mut distinct = xs.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() < 3 {
                return Err(FitError::TooFewPoints {
                    budget,
                    need: 3,
                    got: distinct.len(),
                });
            }
            let design = DMatrix::from_fn(xs.len(), 3, |r, c| xs[r].powi(2 - c as i32));
            let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.val_loss));
            let coef = least_squares(design, y).ok_or(FitError::Degenerate("collinear sizes"))?;
            let (a, b, c) = (coef[0], coef[1], coef[2]);
            if a <= 0.0 {
                return Err(FitError::NoInteriorMinimum(budget));
            }
            let x = -b / (2.0 * a);
            Ok(IsoflopFit {
                flop_budget: budget,
                a,
                b,
                c,
                log_argmin: x,
                argmin_params: x.exp(),
                min_loss: c - b * b / (4.0 * a),
            })
        })
        .collect()
}

/// Ordinary least squares on `(ln x, ln y)`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<PowerLawFit, FitError> {
    if x.len() != y.len() {
        return Err(FitError::Degenerate("x and y differ in length"));
    }
    if x.len() < 2 {
        return Err(FitError::Degenerate("need at least two pairs"));
    }
    let lx = x.iter().map(|&v| positive(v).map(f64::ln)).collect::<Result<Vec<_>, _>>()?;
    let ly = y.iter().map(|&v| positive(v).map(f64::ln)).collect::<Result<Vec<_>, _>>()?;
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(FitError::Degenerate("all x equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(PowerLawFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn pt(budget: f64, logn: f64, loss: f64) -> IsoflopPoint {
        IsoflopPoint {
            flop_budget: budget,
            param_count: logn.exp(),
            val_loss: loss,
        }
    }

    #[test]
    fn exact_parabola() {
        let pts: Vec<_> = (0..5).map(|i| pt(1e15, 1.0 + i as f64, (i as f64 - 2.0).powi(2) + 1.0)).collect();
        let f = fit_isoflop(&pts).unwrap();
        assert_eq!(f.len(), 1);
        assert!((f[0].log_argmin - 3.0).abs() < 1e-9);
        assert!((f[0].a - 1.0).abs() < 1e-9);
        assert!((f[0].min_loss - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_parabola_recovers_argmin() {
        let noise = Normal::new(0.0, 1e-3).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = 15.0;
            let pts: Vec<_> = (0..7)
                .map(|i| {
                    let x = 13.5 + 0.5 * i as f64;
                    pt(1e17, x, 0.3 * (x - truth).powi(2) + 2.0 + noise.sample(&mut rng))
                })
                .collect();
            let f = fit_isoflop(&pts).unwrap();
            assert!((f[0].log_argmin - truth).abs() / truth < 0.01, "seed {seed}");
        }
    }

    #[test]
    fn groups_by_budget_in_order() {
        let mut pts = Vec::new();
        for (budget, centre) in [(1e18, 17.0), (1e16, 15.0)] {
            for i in 0..4 {
                let x = centre - 1.5 + i as f64;
                pts.push(pt(budget, x, (x - centre).powi(2) + 1.0));
            }
        }
        let f = fit_isoflop(&pts).unwrap();
        assert_eq!(f[0].flop_budget, 1e16);
        assert!((f[0].log_argmin - 15.0).abs() < 1e-9);
        assert!((f[1].log_argmin - 17.0).abs() < 1e-9);
    }

    #[test]
    fn concave_and_degenerate_inputs() {
        let pts: Vec<_> = (0..4).map(|i| pt(1.0, i as f64, -(i as f64 - 1.5).powi(2))).collect();
        let shifted: Vec<_> = pts.iter().map(|p| pt(1.0, p.param_count.ln(), p.val_loss + 10.0)).collect();
        assert_eq!(fit_isoflop(&shifted), Err(FitError::NoInteriorMinimum(1.0)));
        let flat: Vec<_> = (0..5).map(|i| pt(1.0, 2.0 + (i % 2) as f64, 1.0)).collect();
        assert!(matches!(fit_isoflop(&flat), Err(FitError::TooFewPoints { got: 2, .. })));
        assert!(matches!(fit_isoflop(&[pt(1.0, 1.0, -1.0)]), Err(FitError::NonPositive(_))));
        let line: Vec<_> = (0..4).map(|i| pt(1.0, i as f64, 1.0 + i as f64)).collect();
        assert!(matches!(fit_isoflop(&line), Err(FitError::NoInteriorMinimum(_))));
    }

    #[test]
    fn exact_power_law() {
        let x = [1e3, 1e4, 1e5, 1e6];
        let y: Vec<f64> = x.iter().map(|v: &f64| 2.0 * v.powf(0.5)).collect();
        let f = fit_power_law(&x, &y).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.intercept - 2f64.ln()).abs() < 1e-10);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_slope() {
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..12).map(|i| 10f64.powf(15.0 + 0.5 * i as f64)).collect();
        let y: Vec<f64> = x.iter().map(|v: &f64| 0.1 * v.powf(0.53) * f64::exp(noise.sample(&mut rng))).collect();
        let f = fit_power_law(&x, &y).unwrap();
        assert!((f.slope - 0.53).abs() < 0.02, "{}", f.slope);
    }

    #[test]
    fn power_law_rejects_bad_values() {
        assert_eq!(fit_power_law(&[1.0, 0.0], &[1.0, 2.0]), Err(FitError::NonPositive(0.0)));
        assert!(fit_power_law(&[1.0], &[1.0]).is_err());
        assert!(fit_power_law(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn flops_rule() {
        assert_eq!(training_flops(1e6, 2e6), 1.2e13);
    }
}
