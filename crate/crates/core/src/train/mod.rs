//! Optimization, schedules, the training loop and scaling-law fits.

mod optim;
mod scaling;

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, AdamWConfig, NonFiniteGradient};
pub use scaling::{fit_isoflop, fit_power_law, training_flops, FitError, IsoflopFit, IsoflopPoint, PowerLawFit};

use crate::engine::{EngineError, Graph, Var};
use crate::model::{Model, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sequence {index} has {len} tokens; at least 2 are needed")]
    TooShort { index: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("step {step}: {source}")]
    NonFinite { step: usize, source: NonFiniteGradient },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps between validation passes; 0 evaluates once per epoch.
    pub eval_interval: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            warmup_fraction: 0.01,
            final_lr_fraction: 0.1,
            batch_size: 32,
            max_epochs: 200,
            eval_interval: 0,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Linear warmup from 0 over `ceil(warmup_fraction · total)` steps, then
/// cosine decay to `final_lr_fraction · base_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = ((cfg.warmup_fraction * total_steps as f64).ceil() as usize).max(1);
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    let floor = cfg.final_lr_fraction;
    cfg.base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Mean next-token negative log-likelihood over targets that are not `pad_id`.
pub fn clm_loss<T: Scalar>(g: &Graph<T>, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    Ok(g.cross_entropy(logits, &t)?)
}

/// Patience counter over a stream of validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, usize)>,
    misses: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            misses: 0,
        }
    }

    /// Records a loss; returns `true` once `patience` consecutive losses
    /// have failed to beat the best so far.
    pub fn observe(&mut self, step: usize, loss: f64) -> bool {
        match self.best {
            Some((b, _)) if loss >= b => self.misses += 1,
            _ => {
                self.best = Some((loss, step));
                self.misses = 0;
            }
        }
        self.misses >= self.patience
    }

    pub fn improved_at(&self, step: usize) -> bool {
        self.best.is_some_and(|(_, s)| s == step) && self.misses == 0
    }

    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    /// Token-weighted mean loss of the batches since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.step == self.best_step)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,train_loss,val_loss,lr\n");
        for e in &self.evals {
            let _ = writeln!(s, "{},{},{},{},{}", e.step, e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        s
    }
}

/// Right-padded batch. `inputs` and `targets` are `batch × width`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub width: usize,
    pub tokens: usize,
}

pub fn make_batch(seqs: &[&[usize]], pad_id: usize) -> Batch {
    let width = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
    let mut inputs = vec![pad_id; seqs.len() * width];
    let mut targets = vec![pad_id; seqs.len() * width];
    let mut tokens = 0;
    for (r, s) in seqs.iter().enumerate() {
        let n = s.len() - 1;
        inputs[r * width..r * width + n].copy_from_slice(&s[..n]);
        targets[r * width..r * width + n].copy_from_slice(&s[1..]);
        tokens += s[1..].iter().filter(|&&t| t != pad_id).count();
    }
    Batch {
        inputs,
        targets,
        batch: seqs.len(),
        width,
        tokens,
    }
}

/// Groups sequences of similar length. Each epoch sorts by length with a
/// random tie-break, cuts consecutive runs of `batch_size`, then shuffles the
/// order of the runs.
pub fn bucketed_batches<R: Rng + ?Sized>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut keyed: Vec<(usize, u64, usize)> = lengths.iter().enumerate().map(|(i, &l)| (l, rng.random(), i)).collect();
    keyed.sort_unstable();
    let mut batches: Vec<Vec<usize>> = keyed
        .chunks(batch_size)
        .map(|c| c.iter().map(|&(_, _, i)| i).collect())
        .collect();
    batches.shuffle(rng);
    batches
}

/// Token-weighted mean loss over `seqs` with dropout off.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, seqs: &[Vec<usize>], pad_id: usize, batch_size: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyCorpus("evaluation"));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| seqs[i].len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(batch_size.max(1)) {
        let refs: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
        let b = make_batch(&refs, pad_id);
        if b.tokens == 0 {
            continue;
        }
        let g = Graph::new();
        let bound = model.bind(&g);
        let logits = model.forward_on(&g, &bound, &b.inputs, b.batch, false, &mut rng)?;
        let loss = clm_loss(&g, logits, &b.targets, pad_id)?;
        total += g.value(loss).item().as_f64() * b.tokens as f64;
        count += b.tokens;
    }
    if count == 0 {
        return Err(EngineError::NothingToAverage("evaluate_loss").into());
    }
    Ok(total / count as f64)
}

fn check_seqs(seqs: &[Vec<usize>], name: &'static str) -> Result<()> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyCorpus(name));
    }
    if let Some((index, s)) = seqs.iter().enumerate().find(|(_, s)| s.len() < 2) {
        return Err(TrainError::TooShort { index, len: s.len() });
    }
    Ok(())
}

/// Trains on encoded sequences with AdamW and the warmup-cosine schedule,
/// validating at the configured cadence. Returns the parameters of the
/// evaluation with the lowest validation loss.
pub fn train_model<T: Scalar>(
    model: Model<T>,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    pad_id: usize,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    cfg.validate()?;
    check_seqs(train, "training")?;
    check_seqs(val, "validation")?;
    let mut model = model;
    let lengths: Vec<usize> = train.iter().map(Vec::len).collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.max_epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(3);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(4);
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory {
        evals: Vec::new(),
        best_step: 0,
        stopped_early: false,
    };
    let mut best = model.clone();
    let (mut run_loss, mut run_tokens) = (0.0, 0usize);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = bucketed_batches(&lengths, cfg.batch_size, &mut order_rng);
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let refs: Vec<&[usize]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            let b = make_batch(&refs, pad_id);
            let lr = lr_at(step + 1, total, cfg);
            let grads = {
                let g = Graph::new();
                let bound = model.bind(&g);
                let logits = model.forward_on(&g, &bound, &b.inputs, b.batch, true, &mut drop_rng)?;
                let loss = clm_loss(&g, logits, &b.targets, pad_id)?;
                run_loss += g.value(loss).item().as_f64() * b.tokens as f64;
                run_tokens += b.tokens;
                let mut gr = g.backward(loss)?;
                model.params.collect_grads(&mut gr, &bound.vars)
            };
            opt.step(&mut model.params, &grads, lr)
                .map_err(|source| TrainError::NonFinite { step, source })?;
            step += 1;
            let due = if cfg.eval_interval == 0 {
                bi + 1 == n_batches
            } else {
                step % cfg.eval_interval == 0
            };
            if !due {
                continue;
            }
            let val_loss = evaluate_loss(&model, val, pad_id, cfg.batch_size)?;
            let rec = EvalRecord {
                step,
                epoch,
                train_loss: run_loss / run_tokens.max(1) as f64,
                val_loss,
                lr,
            };
            log::info!(
                "epoch {epoch} step {step}: train {:.4} val {:.4} lr {:.2e}",
                rec.train_loss,
                rec.val_loss,
                lr
            );
            history.evals.push(rec);
            (run_loss, run_tokens) = (0.0, 0);
            let stop = stopper.observe(step, val_loss);
            if stopper.improved_at(step) {
                best = model.clone();
                history.best_step = step;
            }
            if stop {
                history.stopped_early = true;
                break 'epochs;
            }
        }
    }
    if history.evals.is_empty() {
        let val_loss = evaluate_loss(&model, val, pad_id, cfg.batch_size)?;
        history.evals.push(EvalRecord {
            step,
            epoch: cfg.max_epochs - 1,
            train_loss: run_loss / run_tokens.max(1) as f64,
            val_loss,
            lr: lr_at(step, total, cfg),
        });
        history.best_step = step;
        best = model;
    }
    Ok((best, history))
}
