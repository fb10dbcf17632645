//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse order, accumulating gradients additively, so a tensor read by k
//! operations receives the sum of k contributions.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ensure_finite, LayerNormOutput};
use super::{NumError, Tensor};
use crate::scalar::{gemm, Scalar};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    AddConst { x: usize },
    Scale { x: usize, factor: T },
    Gelu { x: usize },
    LayerNorm { x: usize, inv_sigma: Vec<T> },
    Modulate { x: usize, scale: usize, shift: usize },
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Softmax { x: usize },
    Attention { q: usize, k: usize, v: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T> },
    WeightedSum { x: usize, weights: Vec<T> },
    Sum { x: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records primitive operations for one forward pass.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumError {
    NumError::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize, NumError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NumError::MissingDependency);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, NumError> {
        ensure_finite(op_name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var, NumError> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, NumError> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = ops::matmul(self.val(ia), self.val(ib))?;
        self.push("matmul", out, Op::MatMul { a: ia, b: ib })
    }

    /// `a . b^T`; used for the tied output head.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = ops::matmul_nt(self.val(ia), self.val(ib))?;
        self.push("matmul_nt", out, Op::MatMulNt { a: ia, b: ib })
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), NumError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("add", ia, ib)?;
        let mut out = self.val(ia).clone();
        out.add_assign(self.val(ib));
        self.push("add", out, Op::Add { a: ia, b: ib })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("mul", ia, ib)?;
        let mut out = self.val(ia).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.val(ib).data()) {
            *o = *o * y;
        }
        self.push("mul", out, Op::Mul { a: ia, b: ib })
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (ix, ib) = (self.index(x)?, self.index(bias)?);
        let d = self.val(ix).last_dim();
        if self.val(ib).numel() != d {
            return Err(shape_err(
                "add_bias",
                format!("bias of {} for rows of {d}", self.val(ib).numel()),
            ));
        }
        let mut out = self.val(ix).clone();
        let b = self.val(ib).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push("add_bias", out, Op::AddBias { x: ix, bias: ib })
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let mut out = self.val(ix).clone();
        out.data_mut().iter_mut().for_each(|o| *o = *o + c);
        self.push("add_const", out, Op::AddConst { x: ix })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let mut out = self.val(ix).clone();
        out.data_mut().iter_mut().for_each(|o| *o = *o * factor);
        self.push("scale", out, Op::Scale { x: ix, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let out = ops::gelu(self.val(ix))?;
        self.push("gelu", out, Op::Gelu { x: ix })
    }

    /// `(h - mu) / sigma` per row; the statistics are returned alongside.
    pub fn layer_norm(&mut self, h: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>), NumError> {
        let ih = self.index(h)?;
        let LayerNormOutput {
            normalized,
            mean,
            sigma,
        } = ops::layer_norm_core(self.val(ih), eps)?;
        let inv_sigma = sigma.iter().map(|&s| T::one() / s).collect();
        let v = self.push("layer_norm", normalized, Op::LayerNorm { x: ih, inv_sigma })?;
        Ok((v, mean, sigma))
    }

    /// `out[r] = scale[g] * x[r] + shift[g]` with `g = r / (rows / groups)`.
    ///
    /// `scale` and `shift` are `[groups x D]`; rows of `x` are split into
    /// `groups` contiguous blocks of equal size.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, NumError> {
        let (ix, is, ih) = (self.index(x)?, self.index(scale)?, self.index(shift)?);
        let d = self.val(ix).last_dim();
        let rows = self.val(ix).rows();
        let groups = self.val(is).rows();
        if self.val(is).shape() != self.val(ih).shape()
            || self.val(is).last_dim() != d
            || groups == 0
            || rows % groups != 0
        {
            return Err(shape_err(
                "modulate",
                format!(
                    "x {:?}, scale {:?}, shift {:?}",
                    self.val(ix).shape(),
                    self.val(is).shape(),
                    self.val(ih).shape()
                ),
            ));
        }
        let per = rows / groups;
        let mut out = self.val(ix).clone();
        let (sc, sh) = (self.val(is).data(), self.val(ih).data());
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let g = r / per;
            let (s, b) = (&sc[g * d..(g + 1) * d], &sh[g * d..(g + 1) * d]);
            for j in 0..d {
                row[j] = s[j] * row[j] + b[j];
            }
        }
        self.push(
            "modulate",
            out,
            Op::Modulate {
                x: ix,
                scale: is,
                shift: ih,
            },
        )
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let it = self.index(table)?;
        let (rows, d) = match *self.val(it).shape() {
            [r, d] => (r, d),
            _ => return Err(shape_err("gather", "table must be a matrix".into())),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumError::Index {
                op: "gather",
                index: bad,
                bound: rows,
            });
        }
        let src = self.val(it).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let (rows, d) = match *self.val(ix).shape() {
            [r, d] => (r, d),
            _ => return Err(shape_err("slice_cols", "expected a matrix".into())),
        };
        if start + len > d {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {d}")));
        }
        let src = self.val(ix).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x: ix, start })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let out = ops::softmax(self.val(ix))?;
        self.push("softmax", out, Op::Softmax { x: ix })
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, D]` with heads laid out as contiguous
    /// column blocks of width `D / heads`. Attention never crosses sequence
    /// boundaries.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var, NumError> {
        let (iq, ik, iv) = (self.index(q)?, self.index(k)?, self.index(v)?);
        let shape = self.val(iq).shape().to_vec();
        let (rows, d) = match shape[..] {
            [r, d] => (r, d),
            _ => return Err(shape_err("attention", "expected matrices".into())),
        };
        if self.val(ik).shape() != shape.as_slice()
            || self.val(iv).shape() != shape.as_slice()
            || seq == 0
            || heads == 0
            || rows % seq != 0
            || d % heads != 0
        {
            return Err(shape_err(
                "attention",
                format!("rows {rows}, width {d}, seq {seq}, heads {heads}"),
            ));
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.val(iq).data(), self.val(ik).data(), self.val(iv).data());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(&[rows, d]);
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    }
                    let p = &mut probs[base + i * seq..base + (i + 1) * seq];
                    ops::softmax_row(&scores, p);
                    let o = &mut out.data_mut()[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc = *oc + pj * vc;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Per-position cross entropy (see [`ops::cross_entropy`]).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], position_mask: &[bool]) -> Result<Var, NumError> {
        let il = self.index(logits)?;
        let lv = self.val(il);
        let (n, v) = ops::check_targets(lv, targets, position_mask)?;
        let mut out = Tensor::zeros(&[n]);
        let mut probs = vec![T::zero(); n * v];
        for i in 0..n {
            if position_mask[i] {
                let row = &lv.data()[i * v..(i + 1) * v];
                ops::softmax_row(row, &mut probs[i * v..(i + 1) * v]);
                out.data_mut()[i] = ops::log_sum_exp(row) - row[targets[i] as usize];
            }
        }
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                mask: position_mask.to_vec(),
                probs,
            },
        )
    }

    /// `sum_i w_i x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        if weights.len() != self.val(ix).numel() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.val(ix).numel()),
            ));
        }
        let total = self
            .val(ix)
            .data()
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum::<T>();
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum {
                x: ix,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let ix = self.index(x)?;
        let total = self.val(ix).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::Sum { x: ix })
    }

    /// Gradients of a scalar `loss` with respect to the requested vars.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>, NumError> {
        let grads = self.backward(loss)?;
        wrt.iter().map(|&v| grads.get(v)).collect()
    }

    /// Full reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        let il = self.index(loss)?;
        if self.val(il).numel() != 1 {
            return Err(NumError::NotScalar {
                shape: self.val(il).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.val(il).shape(), T::one()));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = G B^T, dB = A^T G
                let da = slot(grads, *a, av.shape());
                gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), true);
                let db = slot(grads, *b, bv.shape());
                gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), true);
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                // C = A B^T: dA = G B, dB = G^T A
                let da = slot(grads, *a, av.shape());
                gemm(m, n, k, g.data(), false, bv.data(), false, da.data_mut(), true);
                let db = slot(grads, *b, bv.shape());
                gemm(n, m, k, g.data(), true, av.data(), false, db.data_mut(), true);
            }
            Op::Add { a, b } => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let da = slot(grads, *a, g.shape());
                for ((d, &gv), &y) in da.data_mut().iter_mut().zip(g.data()).zip(bv) {
                    *d = *d + gv * y;
                }
                let db = slot(grads, *b, g.shape());
                for ((d, &gv), &x) in db.data_mut().iter_mut().zip(g.data()).zip(av) {
                    *d = *d + gv * x;
                }
            }
            Op::AddBias { x, bias } => {
                slot(grads, *x, g.shape()).add_assign(g);
                let d = g.last_dim();
                let db = slot(grads, *bias, self.val(*bias).shape());
                for row in g.data().chunks(d) {
                    for (o, &gv) in db.data_mut().iter_mut().zip(row) {
                        *o = *o + gv;
                    }
                }
            }
            Op::AddConst { x } => slot(grads, *x, g.shape()).add_assign(g),
            Op::Scale { x, factor } => {
                let dx = slot(grads, *x, g.shape());
                for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d = *d + gv * *factor;
                }
            }
            Op::Gelu { x } => {
                let xv = self.val(*x).data();
                let dx = slot(grads, *x, g.shape());
                for ((d, &gv), &xi) in dx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    *d = *d + gv * ops::gelu_grad_scalar(xi);
                }
            }
            Op::LayerNorm { x, inv_sigma } => {
                // dx = (g - mean(g) - y * mean(g * y)) / sigma
                let y = &node.value;
                let d = y.last_dim();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let dx = slot(grads, *x, y.shape());
                for (r, &inv) in inv_sigma.iter().enumerate() {
                    let (gr, yr) = (&g.data()[r * d..(r + 1) * d], &y.data()[r * d..(r + 1) * d]);
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for ((o, &gv), &yv) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o = *o + (gv - mean_g - yv * mean_gy) * inv;
                    }
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.val(*x);
                let sv = self.val(*scale);
                let d = xv.last_dim();
                let per = xv.rows() / sv.rows();
                {
                    let dx = slot(grads, *x, xv.shape());
                    for (r, (o, gr)) in dx.data_mut().chunks_mut(d).zip(g.data().chunks(d)).enumerate() {
                        let s = &sv.data()[(r / per) * d..(r / per + 1) * d];
                        for j in 0..d {
                            o[j] = o[j] + gr[j] * s[j];
                        }
                    }
                }
                {
                    let ds = slot(grads, *scale, sv.shape());
                    for (r, (xr, gr)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                        let o = &mut ds.data_mut()[(r / per) * d..(r / per + 1) * d];
                        for j in 0..d {
                            o[j] = o[j] + gr[j] * xr[j];
                        }
                    }
                }
                let dh = slot(grads, *shift, sv.shape());
                for (r, gr) in g.data().chunks(d).enumerate() {
                    let o = &mut dh.data_mut()[(r / per) * d..(r / per + 1) * d];
                    for j in 0..d {
                        o[j] = o[j] + gr[j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tshape = self.val(*table).shape().to_vec();
                let d = tshape[1];
                let dt = slot(grads, *table, &tshape);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, &gv) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *o = *o + gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xshape = self.val(*x).shape().to_vec();
                let d = xshape[1];
                let len = g.last_dim();
                let dx = slot(grads, *x, &xshape);
                for (r, gr) in g.data().chunks(len).enumerate() {
                    for (o, &gv) in dx.data_mut()[r * d + start..r * d + start + len].iter_mut().zip(gr) {
                        *o = *o + gv;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let v = y.last_dim();
                let dx = slot(grads, *x, y.shape());
                for ((o, gr), yr) in dx.data_mut().chunks_mut(v).zip(g.data().chunks(v)).zip(y.data().chunks(v)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..v {
                        o[j] = o[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.backprop_attention(g, grads, (*q, *k, *v), *seq, *heads, probs),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let lshape = self.val(*logits).shape().to_vec();
                let v = lshape[1];
                let dl = slot(grads, *logits, &lshape);
                for (i, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let gi = g.data()[i];
                    let row = &mut dl.data_mut()[i * v..(i + 1) * v];
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = *o + gi * probs[i * v + j];
                    }
                    row[targets[i] as usize] = row[targets[i] as usize] - gi;
                }
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                let dx = slot(grads, *x, self.val(*x).shape());
                for (o, &w) in dx.data_mut().iter_mut().zip(weights) {
                    *o = *o + gv * w;
                }
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                let dx = slot(grads, *x, self.val(*x).shape());
                dx.data_mut().iter_mut().for_each(|o| *o = *o + gv);
            }
        }
        Ok(())
    }

    fn backprop_attention(
        &self,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        (q, k, v): (usize, usize, usize),
        seq: usize,
        heads: usize,
        probs: &[T],
    ) {
        let shape = self.val(q).shape().to_vec();
        let (rows, d) = (shape[0], shape[1]);
        let batch = rows / seq;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut dq = Tensor::zeros(&shape);
        let mut dk = Tensor::zeros(&shape);
        let mut dv = Tensor::zeros(&shape);
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let gi = &g.data()[(b * seq + i) * d + h * dh..][..dh];
                    let p = &probs[base + i * seq..base + (i + 1) * seq];
                    // dV_j += p_ij g_i ; dP_ij = g_i . v_j
                    for j in 0..seq {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        let dvj = &mut dv.data_mut()[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &gv) in dvj.iter_mut().zip(gi) {
                            *o = *o + p[j] * gv;
                        }
                    }
                    let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<T>();
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        let dqi = &mut dq.data_mut()[(b * seq + i) * d + h * dh..][..dh];
                        for (o, &kv) in dqi.iter_mut().zip(kj) {
                            *o = *o + ds * kv;
                        }
                        let dkj = &mut dk.data_mut()[(b * seq + j) * d + h * dh..][..dh];
                        for (o, &qv) in dkj.iter_mut().zip(qi) {
                            *o = *o + ds * qv;
                        }
                    }
                }
            }
        }
        slot(grads, q, &shape).add_assign(&dq);
        slot(grads, k, &shape).add_assign(&dk);
        slot(grads, v, &shape).add_assign(&dv);
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], i: usize, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Result<Tensor<T>, NumError> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumError::MissingDependency);
        }
        Ok(self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>, NumError> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumError::MissingDependency);
        }
        Ok(self.grads[v.idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }
}
