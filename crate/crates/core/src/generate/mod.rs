//! Grammar-constrained autoregressive generation of records.

mod sampler;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sampler::{nucleus, nucleus_sample, Nucleus, SamplerConfig};

use crate::corpus::Record;
use crate::model::{InferenceSession, Model, ModelError};
use crate::scalar::Scalar;
use crate::vocab::{
    decode_sequence, validate_prefix, validate_sequence, DecodeOptions, GrammarState, TokenKind, TokenSequence,
    VocabError, Vocabulary,
};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("no token is allowed at this step")]
    EmptyAllowSet,
    #[error("logit for token {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("model vocabulary has {model} tokens, vocabulary file has {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("invalid prefix at {index}: {message}")]
    InvalidPrefix { index: usize, message: String },
    #[error("no demographic seeds")]
    NoSeeds,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, GenerateError>;

/// Allow-mask for the token after `context`.
pub fn transition_mask(context: &[usize], vocab: &Vocabulary) -> Result<Vec<bool>> {
    if let Some(v) = validate_prefix(context, vocab).into_iter().next() {
        return Err(GenerateError::InvalidPrefix {
            index: v.index,
            message: v.message,
        });
    }
    let mut state = GrammarState::new();
    for &id in context {
        state.advance(vocab.kind(id));
    }
    if state.is_complete() {
        return Err(GenerateError::InvalidPrefix {
            index: context.len(),
            message: "record already complete".into(),
        });
    }
    Ok(state.allowed(vocab))
}

/// Cached allow-masks keyed by grammar state; the mask depends on nothing else.
struct MaskCache<'v> {
    vocab: &'v Vocabulary,
    entries: Vec<(GrammarState, Vec<bool>)>,
}

impl<'v> MaskCache<'v> {
    fn new(vocab: &'v Vocabulary) -> Self {
        Self {
            vocab,
            entries: Vec::new(),
        }
    }

    fn get(&mut self, state: &GrammarState) -> &[bool] {
        let pos = match self.entries.iter().position(|(s, _)| s == state) {
            Some(p) => p,
            None => {
                self.entries.push((*state, state.allowed(self.vocab)));
                self.entries.len() - 1
            }
        };
        &self.entries[pos].1
    }
}

fn check_vocab<T: Scalar>(model: &Model<T>, vocab: &Vocabulary) -> Result<()> {
    if model.cfg.vocab_size != vocab.len() {
        return Err(GenerateError::VocabMismatch {
            model: model.cfg.vocab_size,
            vocab: vocab.len(),
        });
    }
    Ok(())
}

fn generate_inner<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    demographics: &[usize; 5],
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    masks: &mut MaskCache<'_>,
    rng: &mut R,
    observe: &mut dyn FnMut(&Nucleus, usize),
) -> Result<TokenSequence> {
    let budget = cfg.max_tokens.min(model.cfg.context_len);
    let mut ids = Vec::with_capacity(budget.min(256));
    ids.push(vocab.start_record_id());
    ids.extend_from_slice(demographics);
    let mut state = GrammarState::new();
    for (i, &id) in ids.iter().enumerate() {
        let kind = vocab.token(id)?.kind;
        if let Some(m) = state.check(kind) {
            return Err(GenerateError::InvalidPrefix {
                index: i,
                message: m.into(),
            });
        }
        state.advance(kind);
    }
    let mut session = InferenceSession::new(model)?;
    let mut logits = Vec::new();
    for &id in &ids {
        logits = session.step(id)?;
    }
    loop {
        if ids.len() >= budget {
            return Ok(TokenSequence { ids, truncated: true });
        }
        let nu = nucleus(&logits, masks.get(&state), cfg)?;
        let next = nu.draw(rng);
        observe(&nu, next);
        ids.push(next);
        let kind = vocab.kind(next);
        state.advance(kind);
        if matches!(kind, TokenKind::EndRecord | TokenKind::Death) {
            return Ok(TokenSequence { ids, truncated: false });
        }
        if ids.len() < budget {
            logits = session.step(next)?;
        }
    }
}

/// Samples one record after `START_RECORD` and the five demographic tokens,
/// stopping at `END_RECORD`, `DEATH` or the token budget.
pub fn generate_record<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    demographics: &[usize; 5],
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    generate_record_observed(model, demographics, vocab, cfg, rng, &mut |_, _| {})
}

/// [`generate_record`] that reports each step's nucleus and the drawn token.
pub fn generate_record_observed<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    demographics: &[usize; 5],
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    rng: &mut R,
    observe: &mut dyn FnMut(&Nucleus, usize),
) -> Result<TokenSequence> {
    cfg.validate()?;
    check_vocab(model, vocab)?;
    let mut masks = MaskCache::new(vocab);
    generate_inner(model, demographics, vocab, cfg, &mut masks, rng, observe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordViolation {
    pub record: usize,
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_requested: usize,
    pub n_complete: usize,
    pub n_truncated: usize,
    pub violations: Vec<RecordViolation>,
    pub token_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    /// Materialized complete records, in generation order.
    pub records: Vec<Record>,
    /// Every sampled sequence, truncated ones included.
    pub sequences: Vec<TokenSequence>,
    pub report: GenerationReport,
}

/// Demographic seed for record `i`: the i-th seed while they last, then a
/// uniform draw from a stream keyed by the record's seed.
fn seed_for(i: usize, seeds: &[Record], base: u64) -> &Record {
    if i < seeds.len() {
        &seeds[i]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(i as u64));
        rng.set_stream(2);
        &seeds[rng.random_range(0..seeds.len())]
    }
}

struct Generated {
    seq: TokenSequence,
    record: Option<Record>,
}

fn generate_one<T: Scalar>(
    model: &Model<T>,
    seeds: &[Record],
    vocab: &Vocabulary,
    cfg: &SamplerConfig,
    masks: &mut MaskCache<'_>,
    i: usize,
) -> Result<Generated> {
    let s = seed_for(i, seeds, cfg.seed);
    let demo = vocab.demographic_ids(s.age_years, s.sex, s.race, s.marital, s.year);
    let record_seed = cfg.seed.wrapping_add(i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
    let seq = generate_inner(model, &demo, vocab, cfg, masks, &mut rng, &mut |_, _| {})?;
    let record = if seq.truncated {
        None
    } else {
        let mut drng = ChaCha8Rng::seed_from_u64(record_seed);
        drng.set_stream(1);
        let opts = DecodeOptions {
            patient_id: format!("synthetic_{i:06}"),
            epoch: None,
        };
        let mut r = decode_sequence(&seq.ids, vocab, &opts, &mut drng)?;
        // the age token keeps only the 5-year bin; the seed's exact age is known
        r.age_years = s.age_years;
        Some(r)
    };
    Ok(Generated { seq, record })
}

/// Generates `n` records seeded with the demographics of `seeds`. Record `i`
/// samples with seed `cfg.seed + i`, so the cohort is identical for any
/// number of workers.
pub fn generate_cohort<T: Scalar>(
    model: &Model<T>,
    seeds: &[Record],
    vocab: &Vocabulary,
    n: usize,
    cfg: &SamplerConfig,
) -> Result<Cohort> {
    cfg.validate()?;
    check_vocab(model, vocab)?;
    if seeds.is_empty() {
        return Err(GenerateError::NoSeeds);
    }
    let workers = cfg.workers.min(n.max(1));
    let results: Vec<Result<Generated>> = if workers <= 1 {
        let mut masks = MaskCache::new(vocab);
        (0..n).map(|i| generate_one(model, seeds, vocab, cfg, &mut masks, i)).collect()
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut masks = MaskCache::new(vocab);
                        (w * chunk..((w + 1) * chunk).min(n))
                            .map(|i| generate_one(model, seeds, vocab, cfg, &mut masks, i))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generation worker panicked"))
                .collect()
        })
    };
    let mut records = Vec::new();
    let mut sequences = Vec::with_capacity(n);
    let mut report = GenerationReport {
        n_requested: n,
        n_complete: 0,
        n_truncated: 0,
        violations: Vec::new(),
        token_counts: Vec::with_capacity(n),
    };
    for (i, r) in results.into_iter().enumerate() {
        let g = r?;
        let found = if g.seq.truncated {
            report.n_truncated += 1;
            validate_prefix(&g.seq.ids, vocab)
        } else {
            report.n_complete += 1;
            validate_sequence(&g.seq.ids, vocab)
        };
        report.violations.extend(found.into_iter().map(|v| RecordViolation {
            record: i,
            index: v.index,
            message: v.message,
        }));
        report.token_counts.push(g.seq.len());
        records.extend(g.record);
        sequences.push(g.seq);
    }
    log::info!(
        "generated {} records: {} complete, {} truncated, {} violations",
        n,
        report.n_complete,
        report.n_truncated,
        report.violations.len()
    );
    Ok(Cohort {
        records,
        sequences,
        report,
    })
}

#[cfg(test)]
mod tests;
