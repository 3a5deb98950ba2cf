//! Temperature, masking and top-p truncation over one logit row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenerateError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Upper bound on sequence length, including the prefix.
    pub max_tokens: usize,
    pub seed: u64,
    /// Threads for cohort generation. Output does not depend on this.
    pub workers: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.98,
            temperature: 1.0,
            max_tokens: 2048,
            seed: 0,
            workers: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenerateError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenerateError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_tokens < 7 {
            return Err(GenerateError::Config("max_tokens below the 7-token minimal record".into()));
        }
        if self.workers == 0 {
            return Err(GenerateError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// The renormalized candidate set of one sampling step, most probable first.
#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    pub tokens: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Nucleus {
    pub fn contains(&self, id: usize) -> bool {
        self.tokens.contains(&id)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&t, &p) in self.tokens.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return t;
            }
        }
        *self.tokens.last().expect("nucleus is never empty")
    }
}

/// Softmax over allowed tokens at `temperature`, then the smallest
/// descending-probability prefix whose mass reaches `top_p`, renormalized.
/// Ties in probability keep the lower id first.
pub fn nucleus<T: Scalar>(logits: &[T], allow: &[bool], cfg: &SamplerConfig) -> Result<Nucleus> {
    if logits.len() != allow.len() {
        return Err(GenerateError::Config(format!(
            "{} logits for a mask over {} tokens",
            logits.len(),
            allow.len()
        )));
    }
    let mut cand: Vec<(usize, f64)> = allow
        .iter()
        .enumerate()
        .filter(|&(_, &a)| a)
        .map(|(i, _)| (i, logits[i].as_f64() / cfg.temperature))
        .collect();
    if cand.is_empty() {
        return Err(GenerateError::EmptyAllowSet);
    }
    if let Some(&(i, _)) = cand.iter().find(|(_, l)| !l.is_finite()) {
        return Err(GenerateError::NonFiniteLogit(i));
    }
    let mx = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for c in cand.iter_mut() {
        c.1 = (c.1 - mx).exp();
        z += c.1;
    }
    for c in cand.iter_mut() {
        c.1 /= z;
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = cand.len();
    for (k, c) in cand.iter().enumerate() {
        mass += c.1;
        if mass >= cfg.top_p {
            keep = k + 1;
            break;
        }
    }
    cand.truncate(keep);
    let kept: f64 = cand.iter().map(|c| c.1).sum();
    Ok(Nucleus {
        tokens: cand.iter().map(|c| c.0).collect(),
        probs: cand.iter().map(|c| c.1 / kept).collect(),
    })
}

pub fn nucleus_sample<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    allow: &[bool],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<usize> {
    Ok(nucleus(logits, allow, cfg)?.draw(rng))
}
