//! Forward definitions of the tape primitives.

use std::rc::Rc;

use rand::Rng;

use super::{EngineError, Graph, Op, Result, Tensor, Var};
use crate::scalar::Scalar;

/// Compressed sparse row matrix used for graph message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut trip: Vec<(usize, usize, T)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            assert!(r < rows && c < cols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out += A · x` for row-major `x` with `d` columns.
    pub(crate) fn mul_dense_into(&self, x: &[T], d: usize, out: &mut [T]) {
        for r in 0..self.rows {
            let orow = &mut out[r * d..(r + 1) * d];
            for (c, w) in self.row_entries(r) {
                for (o, &xv) in orow.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o += w * xv;
                }
            }
        }
    }

    /// `out += Aᵀ · g`.
    pub(crate) fn mul_transpose_dense_into(&self, g: &[T], d: usize, out: &mut [T]) {
        for r in 0..self.rows {
            let grow = &g[r * d..(r + 1) * d];
            for (c, w) in self.row_entries(r) {
                for (o, &gv) in out[c * d..(c + 1) * d].iter_mut().zip(grow) {
                    *o += w * gv;
                }
            }
        }
    }
}

/// Lower-triangular attention mask for `seq` positions (`true` = visible).
pub fn causal_mask(seq: usize) -> Rc<[bool]> {
    let mut m = vec![false; seq * seq];
    for i in 0..seq {
        for j in 0..=i {
            m[i * seq + j] = true;
        }
    }
    m.into()
}

/// Rotates consecutive component pairs of every `head_dim` row in place.
///
/// `data` is laid out as `[n, seq, head_dim]`; position of row `t` is
/// `offset + t`. `inverse` applies the transposed rotation.
pub fn apply_rotary<T: Scalar>(
    data: &mut [T],
    seq: usize,
    head_dim: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) {
    let half = head_dim / 2;
    let rows = data.len() / head_dim;
    for row in 0..rows {
        let pos = (offset + row % seq) as f64;
        let x = &mut data[row * head_dim..(row + 1) * head_dim];
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::from_f64_lossy(s), T::from_f64_lossy(c));
            let s = if inverse { -s } else { s };
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Batched matrix product on raw buffers.
///
/// `a` holds `batch` matrices stored `m×k` (or `k×m` when `ta`), `b` holds
/// `k×n` (or `n×k` when `tb`); `c <- a·b + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            rsa,
            csa,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            beta,
            &mut c[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
}

/// `[batch·seq, heads·hd]` → `[batch·heads, seq, hd]` on raw buffers.
pub(crate) fn split_heads_raw<T: Scalar>(src: &[T], batch: usize, seq: usize, heads: usize, hd: usize) -> Vec<T> {
    let width = heads * hd;
    let mut data = vec![T::zero(); src.len()];
    for b in 0..batch {
        for t in 0..seq {
            let row = &src[(b * seq + t) * width..(b * seq + t + 1) * width];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * hd;
                data[dst..dst + hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
            }
        }
    }
    data
}

pub(crate) fn merge_heads_raw<T: Scalar>(src: &[T], batch: usize, seq: usize, heads: usize, hd: usize) -> Vec<T> {
    let width = heads * hd;
    let mut data = vec![T::zero(); src.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let from = ((b * heads + h) * seq + t) * hd;
                let dst = (b * seq + t) * width + h * hd;
                data[dst..dst + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    data
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn mismatch(op: &'static str, detail: String) -> EngineError {
    EngineError::Shape { op, detail }
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let (rows, cols) = match r {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[r - 2], shape[r - 1]),
    };
    let batch = shape.iter().product::<usize>() / (rows * cols).max(1);
    (batch, rows, cols)
}

impl<T: Scalar> Graph<T> {
    /// Matrix product over the last two axes, with optional transposes.
    /// Leading axes are treated as a batch and must agree.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (out, shape) = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.shape.len() < 2 || bv.shape.len() < 2 {
                return Err(mismatch(
                    "matmul",
                    format!("need matrices, got {:?} and {:?}", av.shape, bv.shape),
                ));
            }
            let (ba, ra, ca) = split_last2(&av.shape);
            let (bb, rb, cb) = split_last2(&bv.shape);
            let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
            let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
            if k != k2 || ba != bb {
                return Err(mismatch(
                    "matmul",
                    format!("{:?}{} x {:?}{}", av.shape, if ta { "ᵀ" } else { "" }, bv.shape, if tb { "ᵀ" } else { "" }),
                ));
            }
            let mut c = vec![T::zero(); ba * m * n];
            bmm(ba, m, k, n, &av.data, ta, &bv.data, tb, &mut c, T::zero());
            let mut shape = av.shape[..av.shape.len() - 2].to_vec();
            shape.extend([m, n]);
            (c, shape)
        };
        self.push_checked(
            "matmul",
            Tensor { shape, data: out },
            Op::MatMul { a, b, ta, tb },
            &[a, b],
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
            Tensor {
                shape: av.shape.clone(),
                data,
            }
        };
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
            Tensor {
                shape: av.shape.clone(),
                data,
            }
        };
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| v * c).collect(),
            }
        };
        self.push_checked("scale", out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every entry by a one-element tensor (a learnable gate).
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let (xv, sv) = (self.value(x), self.value(s));
            if sv.len() != 1 {
                return Err(mismatch("mul_scalar", format!("gate shape {:?}", sv.shape)));
            }
            let c = sv.data[0];
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| v * c).collect(),
            }
        };
        self.push_checked("mul_scalar", out, Op::MulScalar { x, s }, &[x, s])
    }

    fn row_broadcast(&self, op: &'static str, x: Var, v: Var, mul: bool) -> Result<Tensor<T>> {
        let (xv, vv) = (self.value(x), self.value(v));
        let d = xv.cols();
        if vv.len() != d {
            return Err(mismatch(op, format!("{:?} with vector {:?}", xv.shape, vv.shape)));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_mut(d) {
            for (o, &w) in row.iter_mut().zip(&vv.data) {
                if mul {
                    *o *= w;
                } else {
                    *o += w;
                }
            }
        }
        Ok(Tensor {
            shape: xv.shape.clone(),
            data,
        })
    }

    /// Adds a vector to every row.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, b, false)?;
        self.push_checked("add_row", out, Op::AddRow { x, b }, &[x, b])
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&self, x: Var, g: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, g, true)?;
        self.push_checked("mul_row", out, Op::MulRow { x, g }, &[x, g])
    }

    /// Gathers rows of `table` (`[V, D]`) into `[ids.len(), D]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let tv = self.value(table);
            if tv.shape.len() != 2 {
                return Err(mismatch("embedding", format!("table shape {:?}", tv.shape)));
            }
            let (v, d) = (tv.shape[0], tv.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(EngineError::Index {
                        op: "embedding",
                        index: id,
                        limit: v,
                    });
                }
                data.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
            }
            Tensor {
                shape: vec![ids.len(), d],
                data,
            }
        };
        self.push_checked(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    ///
    /// `mask` covers the last two axes and is broadcast over leading ones.
    /// Masked entries come out as exact zeros; a fully masked row is all zero.
    pub fn masked_softmax(&self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let (_, rows, cols) = split_last2(&xv.shape);
            if mask.len() != rows * cols {
                return Err(mismatch(
                    "masked_softmax",
                    format!("mask of {} for {:?}", mask.len(), xv.shape),
                ));
            }
            let mut data = vec![T::zero(); xv.len()];
            for (ri, (orow, xrow)) in data.chunks_mut(cols).zip(xv.data.chunks(cols)).enumerate() {
                let mrow = &mask[(ri % rows) * cols..(ri % rows + 1) * cols];
                let mut mx = T::neg_infinity();
                for (&v, &m) in xrow.iter().zip(mrow) {
                    if m && v > mx {
                        mx = v;
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for ((o, &v), &m) in orow.iter_mut().zip(xrow).zip(mrow) {
                    if m {
                        *o = (v - mx).exp();
                        sum += *o;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        self.push_checked("masked_softmax", out, Op::MaskedSoftmax { x }, &[x])
    }

    /// Divides each row by its root-mean-square (no learned scale).
    pub fn rms_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv) = {
            let xv = self.value(x);
            let d = xv.cols();
            let eps = T::from_f64_lossy(eps);
            let dn = T::from_usize(d).expect("dim");
            let mut data = xv.data.clone();
            let mut inv = Vec::with_capacity(xv.rows());
            for row in data.chunks_mut(d) {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
                let r = T::one() / (ms + eps).sqrt();
                for v in row.iter_mut() {
                    *v *= r;
                }
                inv.push(r);
            }
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                inv,
            )
        };
        self.push_checked("rms_norm", out, Op::RmsNorm { x, inv }, &[x])
    }

    /// Rotary position embedding over `[n, seq, head_dim]`.
    pub fn rotary(&self, x: Var, base: f64) -> Result<Var> {
        let (out, seq) = {
            let xv = self.value(x);
            if xv.shape.len() != 3 || xv.shape[2] % 2 != 0 {
                return Err(mismatch("rotary", format!("need [n, seq, even], got {:?}", xv.shape)));
            }
            let (seq, dh) = (xv.shape[1], xv.shape[2]);
            let mut data = xv.data.clone();
            apply_rotary(&mut data, seq, dh, 0, base, false);
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                seq,
            )
        };
        self.push_checked("rotary", out, Op::Rotary { x, seq, base }, &[x])
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| v * sigmoid(v)).collect(),
            }
        };
        self.push_checked("silu", out, Op::Silu(x), &[x])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| v.max(T::zero())).collect(),
            }
        };
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    /// `[batch·seq, heads·hd]` → `[batch·heads, seq, hd]`.
    pub fn split_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let width = xv.cols();
            if xv.rows() != batch * seq || width % heads != 0 {
                return Err(mismatch(
                    "split_heads",
                    format!("{:?} into b={batch} t={seq} h={heads}", xv.shape),
                ));
            }
            let hd = width / heads;
            let data = split_heads_raw(&xv.data, batch, seq, heads, hd);
            Tensor {
                shape: vec![batch * heads, seq, hd],
                data,
            }
        };
        self.push_checked(
            "split_heads",
            out,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    /// Inverse of [`Graph::split_heads`] (head concatenation).
    pub fn merge_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.shape.len() != 3 || xv.shape[0] != batch * heads || xv.shape[1] != seq {
                return Err(mismatch(
                    "merge_heads",
                    format!("{:?} from b={batch} t={seq} h={heads}", xv.shape),
                ));
            }
            let hd = xv.shape[2];
            let width = heads * hd;
            let data = merge_heads_raw(&xv.data, batch, seq, heads, hd);
            Tensor {
                shape: vec![batch * seq, width],
                data,
            }
        };
        self.push_checked(
            "merge_heads",
            out,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        )
    }

    /// Shares each key/value head across `groups` consecutive query heads:
    /// `[batch·kv, seq, hd]` → `[batch·kv·groups, seq, hd]`.
    pub fn repeat_kv(&self, x: Var, groups: usize) -> Result<Var> {
        if groups == 1 {
            return Ok(x);
        }
        let out = {
            let xv = self.value(x);
            if xv.shape.len() != 3 {
                return Err(mismatch("repeat_kv", format!("{:?}", xv.shape)));
            }
            let block = xv.shape[1] * xv.shape[2];
            let mut data = Vec::with_capacity(xv.len() * groups);
            for chunk in xv.data.chunks(block) {
                for _ in 0..groups {
                    data.extend_from_slice(chunk);
                }
            }
            Tensor {
                shape: vec![xv.shape[0] * groups, xv.shape[1], xv.shape[2]],
                data,
            }
        };
        self.push_checked("repeat_kv", out, Op::RepeatKv { x, groups }, &[x])
    }

    /// Inverted dropout. Returns `x` itself when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        let (out, mask) = {
            let xv = self.value(x);
            let keep = T::from_f64_lossy(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..xv.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let data = xv.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                mask,
            )
        };
        self.push_checked("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits` (`[n, V]`), skipping rows whose target is `None`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (loss, probs, count) = {
            let lv = self.value(logits);
            let v = lv.cols();
            if lv.rows() != targets.len() {
                return Err(mismatch(
                    "cross_entropy",
                    format!("{} rows vs {} targets", lv.rows(), targets.len()),
                ));
            }
            let mut probs = vec![T::zero(); lv.len()];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (i, (row, prow)) in lv.data.chunks(v).zip(probs.chunks_mut(v)).enumerate() {
                let Some(t) = targets[i] else { continue };
                if t >= v {
                    return Err(EngineError::Index {
                        op: "cross_entropy",
                        index: t,
                        limit: v,
                    });
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (p, &x) in prow.iter_mut().zip(row) {
                    *p = (x - mx).exp();
                    sum += *p;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
                total += (sum.ln() + mx - row[t]).as_f64();
                count += 1;
            }
            if count == 0 {
                return Err(EngineError::NothingToAverage("cross_entropy"));
            }
            (T::from_f64_lossy(total / count as f64), probs, count)
        };
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of raw scores against 0/1 labels.
    pub fn bce_with_logits(&self, x: Var, labels: &[T]) -> Result<Var> {
        let loss = {
            let xv = self.value(x);
            if xv.len() != labels.len() || labels.is_empty() {
                return Err(mismatch(
                    "bce_with_logits",
                    format!("{} scores vs {} labels", xv.len(), labels.len()),
                ));
            }
            let n = T::from_usize(labels.len()).expect("count");
            xv.data
                .iter()
                .zip(labels)
                .map(|(&s, &y)| s.max(T::zero()) - s * y + (T::one() + (-s.abs()).exp()).ln())
                .sum::<T>()
                / n
        };
        self.push_checked(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n.max(1)).expect("count"))
    }

    /// Sums the last axis: `[n, d]` → `[n]`.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            let d = xv.cols();
            let data: Vec<T> = xv.data.chunks(d).map(|r| r.iter().copied().sum()).collect();
            Tensor {
                shape: vec![data.len()],
                data,
            }
        };
        self.push_checked("sum_rows", out, Op::SumRows(x), &[x])
    }

    /// Sparse-dense product `A · x` with a constant sparse `A`.
    pub fn spmm(&self, adj: Rc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            if xv.shape.len() != 2 || xv.shape[0] != adj.cols {
                return Err(mismatch(
                    "spmm",
                    format!("{}x{} sparse with {:?}", adj.rows, adj.cols, xv.shape),
                ));
            }
            let d = xv.shape[1];
            let mut data = vec![T::zero(); adj.rows * d];
            adj.mul_dense_into(&xv.data, d, &mut data);
            Tensor {
                shape: vec![adj.rows, d],
                data,
            }
        };
        self.push_checked("spmm", out, Op::Spmm { adj, x }, &[x])
    }
}
