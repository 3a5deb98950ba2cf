//! Decoder-only transformer over clinical tokens.
//!
//! Input rows are `E1[token]·E2` plus the gated knowledge term. Blocks are
//! pre-RMSNorm with rotary grouped-query attention and a SwiGLU feed-forward
//! (gate, up and down matrices). The output head is tied to the token
//! factors: `logits = (h·W_out)·E1ᵀ`. No tensor carries a bias.

mod infer;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{causal_mask, EngineError, Graph, Tensor, Var};
use crate::knowledge::{knowledge_rows, FusedEmbeddings, NORM_EPS, SEMANTIC_DIM};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensorfile::TensorFileError;

pub use infer::InferenceSession;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} outside a vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds the {context}-token context")]
    TooLong { len: usize, context: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub factor_dim: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub context_len: usize,
    pub dropout: f64,
    /// Width of the pooled graph vectors.
    pub struct_dim: usize,
    /// Width of the text vectors.
    pub sem_dim: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            factor_dim: 100,
            model_dim: 384,
            ffn_hidden: 1024,
            layers: 6,
            heads: 6,
            kv_heads: 2,
            context_len: 2048,
            dropout: 0.1,
            struct_dim: 384,
            sem_dim: SEMANTIC_DIM,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration for a vocabulary of `vocab_size` tokens.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.kv_heads == 0 {
            return bad("vocabulary, layers and head counts must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.heads % self.kv_heads != 0 {
            return bad(format!("{} heads not divisible by {} kv heads", self.heads, self.kv_heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("rotary embedding needs an even head width, got {}", self.head_dim()));
        }
        if self.factor_dim == 0 || self.factor_dim > self.model_dim {
            return bad(format!("factor_dim {} must lie in 1..={}", self.factor_dim, self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.context_len < 2 {
            return bad("context must hold at least two tokens".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub components: Vec<ComponentCount>,
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

/// Closed-form parameter inventory.
pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let (v, e, d, f) = (cfg.vocab_size, cfg.factor_dim, cfg.model_dim, cfg.ffn_hidden);
    let kv = cfg.kv_heads * cfg.head_dim();
    let block = 2 * d + d * d + 2 * d * kv + d * d + 3 * d * f;
    let rows = [
        ("token_factors", v * e, true),
        ("factor_projection", e * d, true),
        ("hierarchy_embeddings", v * cfg.struct_dim, false),
        ("hierarchy_projection", cfg.struct_dim * d, true),
        ("semantic_embeddings", v * cfg.sem_dim, false),
        ("semantic_projection", cfg.sem_dim * d, true),
        ("knowledge_norms", 2 * d, true),
        ("knowledge_gates", 2, true),
        ("decoder_blocks", cfg.layers * block, true),
        ("final_norm", d, true),
        ("output_projection", d * e, true),
    ];
    let components: Vec<ComponentCount> = rows
        .iter()
        .map(|&(name, count, trainable)| ComponentCount {
            name: name.to_string(),
            count,
            trainable,
        })
        .collect();
    let total = components.iter().map(|c| c.count).sum();
    let trainable = components.iter().filter(|c| c.trainable).map(|c| c.count).sum();
    ParamBreakdown {
        components,
        total,
        trainable,
        frozen: total - trainable,
    }
}

pub mod names {
    pub const TOK_FACTORS: &str = "tok.factors";
    pub const TOK_PROJ: &str = "tok.proj";
    pub const STRUCT_RAW: &str = "know.struct_raw";
    pub const STRUCT_PROJ: &str = "know.struct_proj";
    pub const SEM_RAW: &str = "know.sem_raw";
    pub const SEM_PROJ: &str = "know.sem_proj";
    pub const STRUCT_NORM: &str = "know.struct_norm";
    pub const SEM_NORM: &str = "know.sem_norm";
    pub const ALPHA_H: &str = "know.alpha_h";
    pub const ALPHA_S: &str = "know.alpha_s";
    pub const FINAL_NORM: &str = "final_norm";
    pub const OUT_PROJ: &str = "out.proj";

    pub fn block(l: usize, part: &str) -> String {
        format!("blocks.{l}.{part}")
    }
}

/// Config plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

/// Trainable weights drawn from N(0, 0.02²), norm scales at one; the frozen
/// knowledge tables and the initial fusion weights are copied from `fused`.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, fused: &FusedEmbeddings<T>, seed: u64) -> Result<Model<T>> {
    use names::*;
    cfg.validate()?;
    let expect = [
        ("vocabulary", fused.vocab_size(), cfg.vocab_size),
        ("model width", fused.fusion.model_dim(), cfg.model_dim),
        ("structural width", fused.struct_raw.cols(), cfg.struct_dim),
        ("semantic width", fused.sem_raw.cols(), cfg.sem_dim),
    ];
    for (what, got, want) in expect {
        if got != want {
            return Err(ModelError::Shape(format!("fused embeddings have {what} {got}, config expects {want}")));
        }
    }
    let (v, e, d, f) = (cfg.vocab_size, cfg.factor_dim, cfg.model_dim, cfg.ffn_hidden);
    let kv = cfg.kv_heads * cfg.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize]| Tensor::<T>::randn(shape, 0.02, &mut rng);
    let ones = |n: usize| Tensor::<T>::filled(&[n], T::one());
    let mut p = ParamSet::new();
    p.add(TOK_FACTORS, normal(&[v, e]), true, true);
    p.add(TOK_PROJ, normal(&[e, d]), true, true);
    p.add(STRUCT_RAW, fused.struct_raw.clone(), false, false);
    p.add(STRUCT_PROJ, fused.fusion.w_struct.clone(), true, true);
    p.add(SEM_RAW, fused.sem_raw.clone(), false, false);
    p.add(SEM_PROJ, fused.fusion.w_sem.clone(), true, true);
    p.add(STRUCT_NORM, fused.fusion.norm_struct.clone(), true, false);
    p.add(SEM_NORM, fused.fusion.norm_sem.clone(), true, false);
    p.add(ALPHA_H, Tensor::scalar(fused.fusion.alpha_h), true, false);
    p.add(ALPHA_S, Tensor::scalar(fused.fusion.alpha_s), true, false);
    for l in 0..cfg.layers {
        p.add(block(l, "attn_norm"), ones(d), true, false);
        p.add(block(l, "wq"), normal(&[d, d]), true, true);
        p.add(block(l, "wk"), normal(&[d, kv]), true, true);
        p.add(block(l, "wv"), normal(&[d, kv]), true, true);
        p.add(block(l, "wo"), normal(&[d, d]), true, true);
        p.add(block(l, "ffn_norm"), ones(d), true, false);
        p.add(block(l, "w_gate"), normal(&[d, f]), true, true);
        p.add(block(l, "w_up"), normal(&[d, f]), true, true);
        p.add(block(l, "w_down"), normal(&[f, d]), true, true);
    }
    p.add(FINAL_NORM, ones(d), true, false);
    p.add(OUT_PROJ, normal(&[d, e]), true, true);
    Ok(Model {
        cfg: cfg.clone(),
        params: p,
    })
}

/// Parameter handles of one model placed on a graph.
pub struct Bound<'m, T: Scalar> {
    model: &'m Model<T>,
    pub vars: Vec<Var>,
}

impl<'m, T: Scalar> Bound<'m, T> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.model.params.position(name).expect("parameter registered at init")]
    }
}

impl<T: Scalar> Model<T> {
    /// Inventory measured from the stored tensors.
    pub fn breakdown(&self) -> (usize, usize) {
        self.params.counts()
    }

    pub fn bind<'m>(&'m self, g: &Graph<T>) -> Bound<'m, T> {
        Bound {
            model: self,
            vars: self.params.bind(g),
        }
    }

    fn check_ids(&self, ids: &[usize], seq: usize) -> Result<()> {
        if seq > self.cfg.context_len {
            return Err(ModelError::TooLong {
                len: seq,
                context: self.cfg.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Knowledge term for `tokens`, computed once per distinct token.
    fn knowledge_for(&self, g: &Graph<T>, b: &Bound<'_, T>, ids: &[usize]) -> Result<Var> {
        use names::*;
        let mut uniq = ids.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let local: Vec<usize> = ids.iter().map(|i| uniq.binary_search(i).expect("present")).collect();
        let s = g.embedding(b.var(STRUCT_RAW), &uniq)?;
        let e = g.embedding(b.var(SEM_RAW), &uniq)?;
        let k = knowledge_rows(
            g,
            s,
            e,
            b.var(STRUCT_PROJ),
            b.var(SEM_PROJ),
            b.var(STRUCT_NORM),
            b.var(SEM_NORM),
            (b.var(ALPHA_H), b.var(ALPHA_S)),
        )?;
        Ok(g.embedding(k, &local)?)
    }

    /// Input embedding rows for `ids`.
    pub fn embed_on(&self, g: &Graph<T>, b: &Bound<'_, T>, ids: &[usize]) -> Result<Var> {
        use names::*;
        let tok = g.matmul(g.embedding(b.var(TOK_FACTORS), ids)?, b.var(TOK_PROJ))?;
        Ok(g.add(tok, self.knowledge_for(g, b, ids)?)?)
    }

    /// Logits `[batch·seq, V]` for `batch` rows of `seq` tokens laid out
    /// back to back.
    pub fn forward_on<R: Rng + ?Sized>(
        &self,
        g: &Graph<T>,
        b: &Bound<'_, T>,
        ids: &[usize],
        batch: usize,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        use names::*;
        let cfg = &self.cfg;
        if batch == 0 || ids.len() % batch != 0 {
            return Err(ModelError::Shape(format!("{} ids do not split into {batch} rows", ids.len())));
        }
        let seq = ids.len() / batch;
        self.check_ids(ids, seq)?;
        let (h, kvh, hd) = (cfg.heads, cfg.kv_heads, cfg.head_dim());
        let inv_sqrt = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mask = causal_mask(seq);
        let mut x = g.dropout(self.embed_on(g, b, ids)?, cfg.dropout, rng, train)?;
        for l in 0..cfg.layers {
            let v = |part: &str| b.var(&names::block(l, part));
            let xn = g.mul_row(g.rms_norm(x, NORM_EPS)?, v("attn_norm"))?;
            let q = g.rotary(g.split_heads(g.matmul(xn, v("wq"))?, batch, seq, h)?, cfg.rope_base)?;
            let mut k = g.rotary(g.split_heads(g.matmul(xn, v("wk"))?, batch, seq, kvh)?, cfg.rope_base)?;
            let mut vv = g.split_heads(g.matmul(xn, v("wv"))?, batch, seq, kvh)?;
            if h != kvh {
                k = g.repeat_kv(k, h / kvh)?;
                vv = g.repeat_kv(vv, h / kvh)?;
            }
            let scores = g.scale(g.matmul_t(q, k, false, true)?, inv_sqrt)?;
            let att = g.matmul(g.masked_softmax(scores, mask.clone())?, vv)?;
            let o = g.matmul(g.merge_heads(att, batch, seq, h)?, v("wo"))?;
            x = g.add(x, g.dropout(o, cfg.dropout, rng, train)?)?;

            let xn = g.mul_row(g.rms_norm(x, NORM_EPS)?, v("ffn_norm"))?;
            let gate = g.silu(g.matmul(xn, v("w_gate"))?)?;
            let up = g.matmul(xn, v("w_up"))?;
            let down = g.matmul(g.mul(gate, up)?, v("w_down"))?;
            x = g.add(x, g.dropout(down, cfg.dropout, rng, train)?)?;
        }
        let hf = g.mul_row(g.rms_norm(x, NORM_EPS)?, b.var(FINAL_NORM))?;
        let he = g.matmul(hf, b.var(OUT_PROJ))?;
        Ok(g.matmul_t(he, b.var(TOK_FACTORS), false, true)?)
    }

    /// Logits `[seq, V]` for one sequence.
    pub fn forward<R: Rng + ?Sized>(&self, ids: &[usize], train: bool, rng: &mut R) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = self.bind(&g);
        let out = self.forward_on(&g, &b, ids, 1, train, rng)?;
        let logits = g.value(out).clone();
        Ok(logits)
    }

    /// Fused knowledge matrix `[V, D]` under the current fusion weights.
    pub fn knowledge_table(&self) -> Result<Tensor<T>> {
        let g = Graph::new();
        let b = self.bind(&g);
        let all: Vec<usize> = (0..self.cfg.vocab_size).collect();
        let k = self.knowledge_for(&g, &b, &all)?;
        let out = g.value(k).clone();
        Ok(out)
    }

    /// Writes config, seed and step next to the tensors.
    pub fn save(&self, path: impl AsRef<Path>, seed: u64, step: u64) -> Result<()> {
        let meta = json!({"config": self.cfg, "seed": seed, "step": step});
        Ok(self.params.save(path, meta)?)
    }

    /// Returns the model and the stored `(seed, step)`.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64, u64)> {
        let (params, meta) = ParamSet::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        cfg.validate()?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let step = meta["step"].as_u64().unwrap_or(0);
        Ok((Self { cfg, params }, seed, step))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests;
