//! Reverse sweep over a recorded [`Graph`].

use super::ops::{apply_rotary, bmm, merge_heads_raw, sigmoid, split_heads_raw};
use super::{EngineError, Graph, Op, Result, Var};
use crate::scalar::Scalar;

/// Gradients of leaf nodes, indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn slot<T: Scalar>(slots: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    slots[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn last2(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    (shape.iter().product::<usize>() / (rows * cols).max(1), rows, cols)
}

impl<T: Scalar> Graph<T> {
    /// Back-propagates from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let nodes = self.nodes();
        let shape = nodes[out.0].value.shape().to_vec();
        if nodes[out.0].value.len() != 1 {
            return Err(EngineError::NotScalar(shape));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        slots[out.0] = Some(vec![T::one()]);

        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    slots[id] = Some(g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ta, tb) = (*ta, *tb);
                    let (batch, ra, ca) = last2(nodes[a.0].value.shape());
                    let (_, rb, cb) = last2(nodes[b.0].value.shape());
                    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
                    let n = if tb { rb } else { cb };
                    if rg(*a) {
                        let da = slot(&mut slots, *a, batch * m * k);
                        if ta {
                            bmm(batch, k, n, m, val(*b), tb, &g, true, da, T::one());
                        } else {
                            bmm(batch, m, n, k, &g, false, val(*b), !tb, da, T::one());
                        }
                    }
                    if rg(*b) {
                        let db = slot(&mut slots, *b, batch * k * n);
                        if tb {
                            bmm(batch, n, m, k, &g, true, val(*a), ta, db, T::one());
                        } else {
                            bmm(batch, k, m, n, val(*a), !ta, &g, false, db, T::one());
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if rg(v) {
                            for (d, &x) in slot(&mut slots, v, g.len()).iter_mut().zip(&g) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if rg(v) {
                            let o = val(other);
                            for ((d, &x), &y) in slot(&mut slots, v, g.len()).iter_mut().zip(&g).zip(o) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        for (d, &gv) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g) {
                            *d += gv * *c;
                        }
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = val(*s)[0];
                    if rg(*x) {
                        for (d, &gv) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g) {
                            *d += gv * sv;
                        }
                    }
                    if rg(*s) {
                        let acc: T = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                        slot(&mut slots, *s, 1)[0] += acc;
                    }
                }
                Op::AddRow { x, b } => {
                    let d = nodes[b.0].value.len();
                    if rg(*x) {
                        for (o, &gv) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    if rg(*b) {
                        let db = slot(&mut slots, *b, d);
                        for row in g.chunks(d) {
                            for (o, &gv) in db.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::MulRow { x, g: gv } => {
                    let d = nodes[gv.0].value.len();
                    let scale = val(*gv);
                    if rg(*x) {
                        let dx = slot(&mut slots, *x, g.len());
                        for (orow, grow) in dx.chunks_mut(d).zip(g.chunks(d)) {
                            for ((o, &u), &w) in orow.iter_mut().zip(grow).zip(scale) {
                                *o += u * w;
                            }
                        }
                    }
                    if rg(*gv) {
                        let xv = val(*x);
                        let dg = slot(&mut slots, *gv, d);
                        for (grow, xrow) in g.chunks(d).zip(xv.chunks(d)) {
                            for ((o, &u), &xx) in dg.iter_mut().zip(grow).zip(xrow) {
                                *o += u * xx;
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if rg(*table) {
                        let d = nodes[table.0].value.cols();
                        let len = nodes[table.0].value.len();
                        let dt = slot(&mut slots, *table, len);
                        for (i, &id) in ids.iter().enumerate() {
                            for (o, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { x, .. } => {
                    if rg(*x) {
                        let y = node.value.data();
                        let d = node.value.cols();
                        let dx = slot(&mut slots, *x, g.len());
                        for ((orow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::RmsNorm { x, inv } => {
                    if rg(*x) {
                        let xv = val(*x);
                        let d = nodes[x.0].value.cols();
                        let dn = T::from_usize(d).expect("dim");
                        let dx = slot(&mut slots, *x, g.len());
                        for (((orow, grow), xrow), &r) in
                            dx.chunks_mut(d).zip(g.chunks(d)).zip(xv.chunks(d)).zip(inv)
                        {
                            let dot: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                            let c = r * r * r * dot / dn;
                            for ((o, &gv), &xx) in orow.iter_mut().zip(grow).zip(xrow) {
                                *o += r * gv - c * xx;
                            }
                        }
                    }
                }
                Op::Rotary { x, seq, base } => {
                    if rg(*x) {
                        let hd = nodes[x.0].value.cols();
                        let mut gr = g.clone();
                        apply_rotary(&mut gr, *seq, hd, 0, *base, true);
                        for (o, &v) in slot(&mut slots, *x, g.len()).iter_mut().zip(&gr) {
                            *o += v;
                        }
                    }
                }
                Op::Silu(x) => {
                    if rg(*x) {
                        let xv = val(*x);
                        for ((o, &gv), &xx) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g).zip(xv) {
                            let s = sigmoid(xx);
                            *o += gv * s * (T::one() + xx * (T::one() - s));
                        }
                    }
                }
                Op::Relu(x) => {
                    if rg(*x) {
                        let xv = val(*x);
                        for ((o, &gv), &xx) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g).zip(xv) {
                            if xx > T::zero() {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    if rg(*x) {
                        let back = merge_heads_raw(&g, *batch, *seq, *heads, node.value.cols());
                        for (o, &v) in slot(&mut slots, *x, g.len()).iter_mut().zip(&back) {
                            *o += v;
                        }
                    }
                }
                Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    if rg(*x) {
                        let hd = nodes[x.0].value.cols();
                        let back = split_heads_raw(&g, *batch, *seq, *heads, hd);
                        for (o, &v) in slot(&mut slots, *x, g.len()).iter_mut().zip(&back) {
                            *o += v;
                        }
                    }
                }
                Op::RepeatKv { x, groups } => {
                    if rg(*x) {
                        let shape = nodes[x.0].value.shape();
                        let block = shape[1] * shape[2];
                        let len = nodes[x.0].value.len();
                        let dx = slot(&mut slots, *x, len);
                        for (i, chunk) in g.chunks(block).enumerate() {
                            let dst = &mut dx[(i / groups) * block..(i / groups + 1) * block];
                            for (o, &v) in dst.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if rg(*x) {
                        for ((o, &gv), &m) in slot(&mut slots, *x, g.len()).iter_mut().zip(&g).zip(mask) {
                            *o += gv * m;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if rg(*logits) {
                        let v = nodes[logits.0].value.cols();
                        let scale = g[0] / T::from_usize(*count).expect("count");
                        let dl = slot(&mut slots, *logits, probs.len());
                        for (i, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let row = &mut dl[i * v..(i + 1) * v];
                            for (o, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                                *o += scale * p;
                            }
                            row[t] -= scale;
                        }
                    }
                }
                Op::BceLogits { x, labels } => {
                    if rg(*x) {
                        let n = T::from_usize(labels.len()).expect("count");
                        let xv = val(*x);
                        for ((o, &s), &y) in slot(&mut slots, *x, labels.len()).iter_mut().zip(xv).zip(labels) {
                            *o += g[0] * (sigmoid(s) - y) / n;
                        }
                    }
                }
                Op::Sum(x) => {
                    if rg(*x) {
                        let len = nodes[x.0].value.len();
                        for o in slot(&mut slots, *x, len).iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::SumRows(x) => {
                    if rg(*x) {
                        let d = nodes[x.0].value.cols();
                        let len = nodes[x.0].value.len();
                        for (row, &gv) in slot(&mut slots, *x, len).chunks_mut(d).zip(&g) {
                            for o in row {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Spmm { adj, x } => {
                    if rg(*x) {
                        let d = node.value.cols();
                        let len = nodes[x.0].value.len();
                        adj.mul_transpose_dense_into(&g, d, slot(&mut slots, *x, len));
                    }
                }
            }
        }
        Ok(Grads { slots })
    }
}
