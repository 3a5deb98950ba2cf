//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, Result, Tensor, Var};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function against central
/// differences at `points`, returning the largest elementwise relative error.
///
/// `f` receives a fresh graph and one trainable [`Var`] per point.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; points[pi].len()]);
        for j in 0..points[pi].len() {
            let orig = points[pi].data()[j];
            work[pi].data_mut()[j] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
