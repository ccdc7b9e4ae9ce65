//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`GradTape`]; [`GradTape::backward`]
//! replays the nodes in exact reverse recording order. Gradient accumulation
//! is additive, so a node consumed by several operations receives the sum of
//! their contributions.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, sigmoid, Tensor};

/// Smallest admissible row sum of an attention mask.
pub const MASK_ROW_EPS: f64 = 1e-9;

/// Handle to a node recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    MaskedSoftmax {
        logits: Var,
        mask: Var,
        // exp(logit - rowmax) / Z, kept for the mask gradient
        ratio: Vec<S>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: S,
        probs: Vec<S>,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RelativeLogits {
        query: Var,
        table: Var,
        head_bias: Var,
        head: usize,
        radius: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Ordered record of tensor operations with their backward rules.
#[derive(Debug, Default)]
pub struct GradTape<S> {
    nodes: Vec<Node<S>>,
}

/// Clips a relative offset `t - s` into `[-radius, radius]` and returns the
/// table index it maps to.
#[inline]
pub fn relative_index(offset: isize, radius: usize) -> usize {
    let r = radius as isize;
    (offset.clamp(-r, r) + r) as usize
}

impl<S: Scalar> GradTape<S> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// participates in it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn output(&self, shape: Vec<usize>, data: Vec<S>, inputs: &[Var]) -> Tensor<S> {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.requires_grad = self.needs(inputs);
        t
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul")?;
        let (k2, n) = self.value(b).expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = self.output(vec![m, n], out, &[a, b]);
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul_nt")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = self.output(vec![m, n], out, &[a, b]);
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = self.output(self.value(a).shape().to_vec(), data, &[a, b]);
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).expect_matrix("add_row")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = self.output(self.value(x).shape().to_vec(), data, &[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = self.output(self.value(a).shape().to_vec(), data, &[a, b]);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = self.output(self.value(x).shape().to_vec(), data, &[x]);
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v <= S::zero() { S::zero() } else { v })
            .collect();
        let t = self.output(self.value(x).shape().to_vec(), data, &[x]);
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = self.output(self.value(x).shape().to_vec(), data, &[x]);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let t = self.output(vec![1], vec![s], &[x]);
        self.push(t, Op::Sum(x))
    }

    /// Row-normalised `M ⊙ exp(logits)`.
    ///
    /// Each row is shifted by the maximum logit over its unmasked entries
    /// before exponentiation; the shift cancels in the ratio.
    pub fn masked_softmax(&mut self, logits: Var, mask: Var) -> Result<Var> {
        let (r, c) = self.value(logits).expect_matrix("masked_softmax")?;
        self.same_shape("masked_softmax", logits, mask)?;
        let l = self.value(logits).data();
        let m = self.value(mask).data();
        let mut out = vec![S::zero(); r * c];
        let mut ratio = vec![S::zero(); r * c];
        for i in 0..r {
            let lr = &l[i * c..(i + 1) * c];
            let mr = &m[i * c..(i + 1) * c];
            let row_sum: S = mr.iter().copied().sum();
            if !(row_sum.as_f64() >= MASK_ROW_EPS) {
                return Err(Error::DegenerateRow {
                    row: i,
                    sum: row_sum.as_f64(),
                });
            }
            let mut max = S::neg_infinity();
            for (&x, &w) in lr.iter().zip(mr) {
                if w > S::zero() && x > max {
                    max = x;
                }
            }
            let mut z = S::zero();
            let er = &mut ratio[i * c..(i + 1) * c];
            for ((e, &x), &w) in er.iter_mut().zip(lr).zip(mr) {
                // unmasked entries have x - max <= 0; the cap keeps the mask
                // gradient of masked-out entries finite
                let d = x - max;
                *e = if d > lit(80.0) { lit::<S>(80.0) } else { d }.exp();
                if w > S::zero() {
                    z += w * *e;
                }
            }
            let or = &mut out[i * c..(i + 1) * c];
            for ((o, e), &w) in or.iter_mut().zip(er.iter_mut()).zip(mr) {
                *e /= z;
                // a masked-out entry may overflow without affecting the row
                *o = if w > S::zero() { w * *e } else { S::zero() };
            }
        }
        let t = self.output(vec![r, c], out, &[logits, mask]);
        Ok(self.push(t, Op::MaskedSoftmax { logits, mask, ratio }))
    }

    /// Per-row standardisation followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (r, c) = self.value(x).expect_matrix("layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        if !(eps > S::zero()) {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let n = S::from_usize(c).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let t = self.output(vec![r, c], out, &[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits[t])` and
    /// a smoothed one-hot target: `1 - smoothing` on the target and
    /// `smoothing / (V - 1)` on every other class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: S) -> Result<Var> {
        let (r, v) = self.value(logits).expect_matrix("cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if !(smoothing >= S::zero() && smoothing < S::one()) {
            return Err(Error::Contract(format!("smoothing must lie in [0, 1), got {smoothing}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: v,
            });
        }
        let (on, off) = smoothed_targets(smoothing, v);
        let l = self.value(logits).data();
        let mut probs = vec![S::zero(); r * v];
        let mut total = S::zero();
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &l[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            let mut loss = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let logp = x - log_z;
                probs[i * v + j] = logp.exp();
                let q = if j == tgt { on } else { off };
                if q > S::zero() {
                    loss -= q * logp;
                }
            }
            total += loss;
        }
        let mean = total / S::from_usize(r).unwrap();
        let t = self.output(vec![1], vec![mean], &[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
        let (r, _) = self.value(first).expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).expect_matrix("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = self.output(vec![r, total], out, parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).expect_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = self.output(vec![ids.len(), d], out, &[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `out[t, s] = query[t] + table[clip(t - s)] + head_bias[head]` for a
    /// `T×T` output, where `query` holds one scalar per position and `table`
    /// has `2·radius + 1` entries.
    pub fn relative_logits(
        &mut self,
        query: Var,
        table: Var,
        head_bias: Var,
        head: usize,
        radius: usize,
    ) -> Result<Var> {
        let n = self.value(query).numel();
        if self.value(table).numel() != 2 * radius + 1 {
            return Err(Error::shape("relative_logits", &[2 * radius + 1], self.value(table).shape()));
        }
        let heads = self.value(head_bias).numel();
        if head >= heads {
            return Err(Error::Index {
                what: "head",
                index: head,
                bound: heads,
            });
        }
        let q = self.value(query).data();
        let p = self.value(table).data();
        let u = self.value(head_bias).data()[head];
        let mut out = vec![S::zero(); n * n];
        for t in 0..n {
            for s in 0..n {
                out[t * n + s] = q[t] + p[relative_index(t as isize - s as isize, radius)] + u;
            }
        }
        let t = self.output(vec![n, n], out, &[query, table, head_bias]);
        Ok(self.push(
            t,
            Op::RelativeLogits {
                query,
                table,
                head_bias,
                head,
                radius,
            },
        ))
    }

    /// Fills the gradient of `loss` into every reachable node that requires
    /// one. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.value.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        // Accumulation buffer for `v`, allocated lazily.
        fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, n: usize) -> &mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    matmul_nt(g, val(b).data(), m, n, k, slot(grads, a, m * k));
                }
                if wants(b) {
                    matmul_tn(val(a).data(), g, m, k, n, slot(grads, b, k * n));
                }
            }
            &Op::MatMulNt(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).rows();
                if wants(a) {
                    matmul_nn(g, val(b).data(), m, n, k, slot(grads, a, m * k));
                }
                if wants(b) {
                    matmul_tn(g, val(a).data(), m, n, k, slot(grads, b, n * k));
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                let c = val(x).cols();
                if wants(x) {
                    let s = slot(grads, x, g.len());
                    s.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if wants(bias) {
                    let s = slot(grads, bias, c);
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let other = val(b).data();
                    let s = slot(grads, a, g.len());
                    for ((o, &gv), &y) in s.iter_mut().zip(g).zip(other) {
                        *o += gv * y;
                    }
                }
                if wants(b) {
                    let other = val(a).data();
                    let s = slot(grads, b, g.len());
                    for ((o, &gv), &y) in s.iter_mut().zip(g).zip(other) {
                        *o += gv * y;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    let s = slot(grads, x, g.len());
                    s.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c);
                }
            }
            &Op::Relu(x) => {
                if wants(x) {
                    let input = val(x).data();
                    let s = slot(grads, x, g.len());
                    for ((o, &gv), &v) in s.iter_mut().zip(g).zip(input) {
                        if v > S::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if wants(x) {
                    let y = nodes[idx].value.data();
                    let s = slot(grads, x, g.len());
                    for ((o, &gv), &yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (S::one() - yv);
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    let n = val(x).numel();
                    let s = slot(grads, x, n);
                    s.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MaskedSoftmax {
                logits,
                mask,
                ratio,
            } => {
                let (logits, mask) = (*logits, *mask);
                let y = nodes[idx].value.data();
                let c = val(logits).cols();
                let r = y.len() / c;
                // d/dlogit = y (g - <g, y>), d/dmask = (e / Z)(g - <g, y>)
                let mut centered = vec![S::zero(); y.len()];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        centered[i * c + j] = gr[j] - dot;
                    }
                }
                if wants(logits) {
                    let s = slot(grads, logits, y.len());
                    for ((o, &cv), &yv) in s.iter_mut().zip(&centered).zip(y) {
                        *o += yv * cv;
                    }
                }
                if wants(mask) {
                    let s = slot(grads, mask, y.len());
                    for ((o, &cv), &rv) in s.iter_mut().zip(&centered).zip(ratio) {
                        *o += rv * cv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = val(x).cols();
                let r = g.len() / c;
                let gw = val(gain).data();
                if wants(gain) {
                    let s = slot(grads, gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants(bias) {
                    let s = slot(grads, bias, c);
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if wants(x) {
                    let n = S::from_usize(c).unwrap();
                    let s = slot(grads, x, g.len());
                    for i in 0..r {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gw[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let d = g[i * c + j] * gw[j];
                            s[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let logits = *logits;
                if wants(logits) {
                    let v = val(logits).cols();
                    let (on, off) = smoothed_targets(*smoothing, v);
                    let scale = g[0] / S::from_usize(targets.len()).unwrap();
                    let s = slot(grads, logits, probs.len());
                    for (i, &tgt) in targets.iter().enumerate() {
                        for j in 0..v {
                            let q = if j == tgt { on } else { off };
                            s[i * v + j] += scale * (probs[i * v + j] - q);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[idx].value.cols();
                let r = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let s = slot(grads, p, r * w);
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + w];
                            s[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, &v)| *o += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if wants(table) {
                    let d = val(table).cols();
                    let n = val(table).numel();
                    let s = slot(grads, table, n);
                    for (row, &id) in ids.iter().enumerate() {
                        s[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            &Op::RelativeLogits {
                query,
                table,
                head_bias,
                head,
                radius,
            } => {
                let n = val(query).numel();
                if wants(query) {
                    let s = slot(grads, query, n);
                    for t in 0..n {
                        s[t] += g[t * n..(t + 1) * n].iter().copied().sum::<S>();
                    }
                }
                if wants(table) {
                    let s = slot(grads, table, 2 * radius + 1);
                    for t in 0..n {
                        for u in 0..n {
                            s[relative_index(t as isize - u as isize, radius)] += g[t * n + u];
                        }
                    }
                }
                if wants(head_bias) {
                    let heads = val(head_bias).numel();
                    let s = slot(grads, head_bias, heads);
                    s[head] += g.iter().copied().sum::<S>();
                }
            }
        }
    }
}

fn smoothed_targets<S: Scalar>(smoothing: S, classes: usize) -> (S, S) {
    if classes < 2 {
        return (S::one(), S::zero());
    }
    (S::one() - smoothing, smoothing / lit::<S>((classes - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = GradTape::<f64>::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(t(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let m = tape.constant(Tensor::full(&[2, 2], 1.0));
        let y = tape.masked_softmax(l, m).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5; 4]);

        let l = tape.constant(t(&[&[3.0, -1.0, 7.0], &[0.2, 9.0, -4.0], &[1.0, 1.0, 1.0]]));
        let m = tape.constant(Tensor::identity(3));
        let y = tape.masked_softmax(l, m).unwrap();
        assert_eq!(tape.value(y), &Tensor::identity(3));

        let l = tape.constant(t(&[&[0.0, 0.0]]));
        let m = tape.constant(t(&[&[1.0, 0.5]]));
        let y = tape.masked_softmax(l, m).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_rejects_zero_row() {
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(Tensor::<f64>::zeros(&[3, 3]));
        let mut mask = Tensor::identity(3);
        mask.data_mut()[4] = 0.0;
        let m = tape.constant(mask);
        match tape.masked_softmax(l, m) {
            Err(Error::DegenerateRow { row: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_survives_huge_logits() {
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(t(&[&[1000.0, 999.0, -1000.0]]));
        let m = tape.constant(t(&[&[1.0, 1.0, 1.0]]));
        let y = tape.masked_softmax(l, m).unwrap();
        assert!(tape.value(y).is_finite());
        // A masked-out huge logit must not swamp the row.
        let l = tape.constant(t(&[&[5000.0, 0.0, 0.0]]));
        let m = tape.constant(t(&[&[0.0, 1.0, 1.0]]));
        let y = tape.masked_softmax(l, m).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[0.0, 2.0, -3.0]).unwrap());
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.880_797_077_977_882_3).abs() < 1e-15);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let y = tape.constant(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        assert!(matches!(tape.add(x, y), Err(Error::Shape { .. })));
        assert!(matches!(tape.mul(x, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap().with_grad());
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = GradTape::<f64>::new();
        let one = tape.constant(Tensor::full(&[2], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[&[4.0, 4.0], &[1.0, 3.0]]));
        let y = tape.layer_norm(x, one, zero, 1e-5).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        let y = tape.layer_norm(x, one, zero, 1e-300).unwrap();
        assert_eq!(&tape.value(y).data()[2..], &[-1.0, 1.0]);

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::from_f64(&[2], &[0.25, -7.0]).unwrap());
        let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -7.0, 0.25, -7.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = GradTape::<f64>::new();
        let l = tape.constant(t(&[&[200.0, 0.0, 0.0], &[0.0, 0.0, 200.0]]));
        let loss = tape.cross_entropy(l, &[0, 2], 0.0).unwrap();
        assert!(tape.value(loss).item() < 1e-80);

        let l = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(l, &[0, 1, 3], 0.0).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        assert!(matches!(
            tape.cross_entropy(l, &[0, 4, 1], 0.1),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap().with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0, 1.0]);

        assert!(matches!(tape.backward(xx), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_operand_accumulates_contributions() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap().with_grad());
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let c = tape.add(a, b).unwrap();
        let d = tape.add(c, x).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().with_grad());
        let c = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn relative_index_clips() {
        assert_eq!(relative_index(0, 2), 2);
        assert_eq!(relative_index(-7, 2), 0);
        assert_eq!(relative_index(9, 2), 4);
        assert_eq!(relative_index(1, 2), 3);
    }
}
