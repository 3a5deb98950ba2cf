//! Token-at-a-time decoding with a per-layer key/value cache.

use super::names::{self, FINAL_NORM, OUT_PROJ, TOK_FACTORS, TOK_PROJ};
use super::{Model, ModelError, Result};
use crate::engine::{apply_rotary, Tensor};
use crate::knowledge::NORM_EPS;
use crate::scalar::Scalar;

/// `x · W` for a row vector and `W` of shape `[in, out]`.
fn vecmat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let out = w.cols();
    let mut y = vec![T::zero(); out];
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (yj, &wij) in y.iter_mut().zip(w.row(i)) {
            *yj += xi * wij;
        }
    }
    y
}

fn rms_scaled<T: Scalar>(x: &[T], scale: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len()).expect("width");
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let r = T::one() / (ms + T::from_f64_lossy(NORM_EPS)).sqrt();
    x.iter().zip(scale).map(|(&v, &g)| v * r * g).collect()
}

struct LayerView<'m, T> {
    attn_norm: &'m [T],
    wq: &'m Tensor<T>,
    wk: &'m Tensor<T>,
    wv: &'m Tensor<T>,
    wo: &'m Tensor<T>,
    ffn_norm: &'m [T],
    w_gate: &'m Tensor<T>,
    w_up: &'m Tensor<T>,
    w_down: &'m Tensor<T>,
}

/// Incremental decoder for one sequence. Feeding tokens one at a time
/// reproduces the rows of the full causal forward pass.
pub struct InferenceSession<'m, T: Scalar> {
    model: &'m Model<T>,
    input_table: Tensor<T>,
    layers: Vec<LayerView<'m, T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    pos: usize,
}

impl<'m, T: Scalar> InferenceSession<'m, T> {
    pub fn new(model: &'m Model<T>) -> Result<Self> {
        let p = &model.params;
        let factors = p.get(TOK_FACTORS);
        let proj = p.get(TOK_PROJ);
        let mut input_table = model.knowledge_table()?;
        let d = model.cfg.model_dim;
        for v in 0..model.cfg.vocab_size {
            let row = vecmat(factors.row(v), proj);
            for (o, x) in input_table.data_mut()[v * d..(v + 1) * d].iter_mut().zip(row) {
                *o = x + *o;
            }
        }
        let layers = (0..model.cfg.layers)
            .map(|l| {
                let t = |part: &str| p.get(&names::block(l, part));
                LayerView {
                    attn_norm: t("attn_norm").data(),
                    wq: t("wq"),
                    wk: t("wk"),
                    wv: t("wv"),
                    wo: t("wo"),
                    ffn_norm: t("ffn_norm").data(),
                    w_gate: t("w_gate"),
                    w_up: t("w_up"),
                    w_down: t("w_down"),
                }
            })
            .collect();
        Ok(Self {
            model,
            input_table,
            layers,
            keys: vec![Vec::new(); model.cfg.layers],
            values: vec![Vec::new(); model.cfg.layers],
            pos: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes `token` and returns next-token logits over the vocabulary.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>> {
        let cfg = &self.model.cfg;
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.context_len {
            return Err(ModelError::TooLong {
                len: self.pos + 1,
                context: cfg.context_len,
            });
        }
        let (h, kvh, hd) = (cfg.heads, cfg.kv_heads, cfg.head_dim());
        let groups = h / kvh;
        let inv_sqrt = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut x = self.input_table.row(token).to_vec();
        let n_ctx = self.pos + 1;
        for (l, lw) in self.layers.iter().enumerate() {
            let xn = rms_scaled(&x, lw.attn_norm);
            let mut q = vecmat(&xn, lw.wq);
            let mut k = vecmat(&xn, lw.wk);
            let v = vecmat(&xn, lw.wv);
            apply_rotary(&mut q, 1, hd, self.pos, cfg.rope_base, false);
            apply_rotary(&mut k, 1, hd, self.pos, cfg.rope_base, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![T::zero(); h * hd];
            let mut w = vec![T::zero(); n_ctx];
            for head in 0..h {
                let kv = head / groups;
                let qh = &q[head * hd..(head + 1) * hd];
                let mut mx = T::neg_infinity();
                for (p, wp) in w.iter_mut().enumerate() {
                    let kp = &keys[(p * kvh + kv) * hd..(p * kvh + kv + 1) * hd];
                    *wp = qh.iter().zip(kp).map(|(&a, &b)| a * b).sum::<T>() * inv_sqrt;
                    mx = mx.max(*wp);
                }
                let mut sum = T::zero();
                for wp in w.iter_mut() {
                    *wp = (*wp - mx).exp();
                    sum += *wp;
                }
                let out = &mut att[head * hd..(head + 1) * hd];
                for (p, &wp) in w.iter().enumerate() {
                    let vp = &values[(p * kvh + kv) * hd..(p * kvh + kv + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vp) {
                        *o += wp / sum * vv;
                    }
                }
            }
            for (xi, oi) in x.iter_mut().zip(vecmat(&att, lw.wo)) {
                *xi += oi;
            }
            let xn = rms_scaled(&x, lw.ffn_norm);
            let gate = vecmat(&xn, lw.w_gate);
            let up = vecmat(&xn, lw.w_up);
            let hidden: Vec<T> = gate
                .iter()
                .zip(&up)
                .map(|(&a, &b)| a / (T::one() + (-a).exp()) * b)
                .collect();
            for (xi, di) in x.iter_mut().zip(vecmat(&hidden, lw.w_down)) {
                *xi += di;
            }
        }
        self.pos += 1;
        let p = &self.model.params;
        let hf = rms_scaled(&x, p.get(FINAL_NORM).data());
        let he = vecmat(&hf, p.get(OUT_PROJ));
        let factors = p.get(TOK_FACTORS);
        Ok((0..cfg.vocab_size)
            .map(|v| factors.row(v).iter().zip(&he).map(|(&a, &b)| a * b).sum())
            .collect())
    }
}
