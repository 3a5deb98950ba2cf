use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient in {param} at element {index}; step rejected")]
pub struct NonFiniteGradient {
    pub param: String,
    pub index: usize,
}

/// AdamW with decoupled decay applied before the moment update.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| {
            if p.trainable {
                vec![T::zero(); p.value.len()]
            } else {
                Vec::new()
            }
        };
        Self {
            cfg,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` aligns with `params`; `None` counts as a zero
    /// gradient. Frozen tensors are never touched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<(), NonFiniteGradient> {
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(NonFiniteGradient {
                        param: params.param(i).name.clone(),
                        index: j,
                    });
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.t as i32));
        let eps = T::from_f64_lossy(c.eps);
        let lr_t = T::from_f64_lossy(lr);
        let shrink = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let one = T::one();
        for i in 0..params.len() {
            let p = params.param_mut(i);
            if !p.trainable {
                continue;
            }
            let decay = p.decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(i).and_then(|g| g.as_deref());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                if decay {
                    *w *= shrink;
                }
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    fn single(x: f64, decay: bool) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(x), true, decay);
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = single(2.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(vec![0.0])], 0.01).unwrap();
        assert!((p.get("x").item() - 2.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = single(1.0, false);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        let mut reached = None;
        for step in 1..=500 {
            let x = p.get("x").item();
            opt.step(&mut p, &[Some(vec![2.0 * x])], 0.05).unwrap();
            if reached.is_none() && p.get("x").item().abs() < 1e-3 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "final x = {}", p.get("x").item());
    }

    #[test]
    fn without_decay_matches_hand_rolled_adam() {
        let mut p = single(0.7, true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = (x - 0.3).sin() + 0.1 * x;
            opt.step(&mut p, &[Some(vec![g])], 0.02).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            x -= 0.02 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("x").item() - x).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn frozen_tensors_never_move() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::filled(&[3], 1.0), true, true);
        p.add("frozen", Tensor::filled(&[3], 0.25), false, true);
        let before = p.get("frozen").clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..20 {
            opt.step(&mut p, &[Some(vec![0.3; 3]), Some(vec![1.0; 3])], 0.1).unwrap();
        }
        assert_eq!(p.get("frozen"), &before);
        assert_ne!(p.get("w").data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = single(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt.step(&mut p, &[Some(vec![f64::NAN])], 0.1).unwrap_err();
        assert_eq!(err.param, "x");
        assert_eq!(p.get("x").item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
