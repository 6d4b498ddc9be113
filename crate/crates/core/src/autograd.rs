//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Nodes that do not depend on a gradient-requiring leaf are treated as
//! constants and never receive a gradient buffer, so frozen weights cost no
//! weight-gradient GEMMs.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `j <= i + offset` (offset = number of cached keys).
    Causal { offset: usize },
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            ng,
        )
    }

    /// `a · bᵀ`; the usual `x · Wᵀ` for a weight stored as `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b), true);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow { a, row }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_in_place(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::Silu(a), ng)
    }

    /// Row-wise RMS normalisation with a learned `1 × cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, xv.cols()), "rms_norm gain shape");
        let cols = xv.cols();
        let mut out = Tensor::zeros(xv.rows(), cols);
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, v), gj) in out.row_mut(i).iter_mut().zip(row).zip(g.data()) {
                *o = v * r * gj;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `s × D`, `k` and `v` are `t × D`; heads split `D` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = qv.shape();
        let t = kv.rows();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.shape(), (t, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide model width");
        if let AttnMask::Causal { offset } = mask {
            assert_eq!(t, offset + s, "causal attention expects offset + queries keys");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * s * t];
        let mut out = Tensor::zeros(s, d);
        for h in 0..heads {
            let p = &mut probs[h * s * t..(h + 1) * s * t];
            {
                let pm = crate::tensor::MatMut {
                    data: p,
                    offset: 0,
                    rows: s,
                    cols: t,
                    rs: t as isize,
                    cs: 1,
                };
                gemm(
                    scale,
                    qv.view().cols_block(h * dh, dh),
                    kv.view().cols_block(h * dh, dh).t(),
                    0.0,
                    pm,
                );
            }
            for i in 0..s {
                let row = &mut p[i * t..(i + 1) * t];
                let visible = match mask {
                    AttnMask::Full => t,
                    AttnMask::Causal { offset } => i + offset + 1,
                };
                let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in &mut row[..visible] {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in &mut row[..visible] {
                    *x /= sum;
                }
                for x in &mut row[visible..] {
                    *x = 0.0;
                }
            }
            let pr = crate::tensor::MatRef {
                data: p,
                offset: 0,
                rows: s,
                cols: t,
                rs: t as isize,
                cs: 1,
            };
            gemm(
                1.0,
                pr,
                vv.view().cols_block(h * dh, dh),
                0.0,
                out.view_mut().cols_block(h * dh, dh),
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < t.rows(), "embedding id {id} out of range");
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(ids.len(), cols, data);
        let ng = self.ng(table);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(value, Op::SliceRows { a, start }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * av.cols());
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_vec(idx.len(), av.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; returns a `1 × 1` node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt];
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// `Σ wᵢ · xᵢ` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root) {
            return Grads { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulates into the gradient buffer of `v` via a closure that writes
    /// into a zero-initialised or existing buffer.
    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor, f64)) {
        if !self.ng(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        match &mut grads[v.0] {
            Some(existing) => f(existing, 1.0),
            slot @ None => {
                let mut t = Tensor::zeros(r, c);
                f(&mut t, 0.0);
                *slot = Some(t);
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                // out = a · op(b); da = g · op(b)ᵀ
                self.acc_with(grads, a, |buf, beta| {
                    let bt = if transpose_b { bv.view() } else { bv.view().t() };
                    gemm(1.0, g.view(), bt, beta, buf.view_mut());
                });
                // db = aᵀ · g, or gᵀ · a when b was transposed
                self.acc_with(grads, b, |buf, beta| {
                    if transpose_b {
                        gemm(1.0, g.view().t(), av.view(), beta, buf.view_mut());
                    } else {
                        gemm(1.0, av.view().t(), g.view(), beta, buf.view_mut());
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                let mut n = g.clone();
                n.scale_in_place(-1.0);
                self.acc(grads, b, n);
            }
            &Op::AddRow { a, row } => {
                self.acc(grads, a, g.clone());
                if self.ng(row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (x, y) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    self.acc(grads, row, r);
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    let bv = self.value(b);
                    let data = g.data().iter().zip(bv.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                if self.ng(b) {
                    let av = self.value(a);
                    let data = g.data().iter().zip(av.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, b, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            &Op::Scale(a, s) => {
                let mut n = g.clone();
                n.scale_in_place(s);
                self.acc(grads, a, n);
            }
            &Op::Silu(a) => {
                let x = self.value(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gy, &v)| {
                        let s = sigmoid(v);
                        gy * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x);
                let gv = self.value(gain);
                let cols = xv.cols();
                if self.ng(x) {
                    let mut dx = Tensor::zeros(xv.rows(), cols);
                    for i in 0..xv.rows() {
                        let r = inv_rms[i];
                        let row = xv.row(i);
                        let gy = g.row(i);
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += gy[j] * gv.data()[j] * row[j] * r;
                        }
                        let mean = dot / cols as f64;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = r * (gy[j] * gv.data()[j] - row[j] * r * mean);
                        }
                    }
                    self.acc(grads, x, dx);
                }
                if self.ng(gain) {
                    let mut dg = Tensor::zeros(1, cols);
                    for i in 0..xv.rows() {
                        let r = inv_rms[i];
                        for ((d, v), gy) in dg.data_mut().iter_mut().zip(xv.row(i)).zip(g.row(i)) {
                            *d += gy * v * r;
                        }
                    }
                    self.acc(grads, gain, dg);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let (s, d) = qv.shape();
                let t = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = self.ng(q).then(|| Tensor::zeros(s, d));
                let mut dk = self.ng(k).then(|| Tensor::zeros(t, d));
                let mut dv = self.ng(v).then(|| Tensor::zeros(t, d));
                let mut dp = vec![0.0; s * t];
                for h in 0..heads {
                    let p = &probs[h * s * t..(h + 1) * s * t];
                    let pr = crate::tensor::MatRef {
                        data: p,
                        offset: 0,
                        rows: s,
                        cols: t,
                        rs: t as isize,
                        cs: 1,
                    };
                    let gh = g.view().cols_block(h * dh, dh);
                    if let Some(dv) = dv.as_mut() {
                        gemm(1.0, pr.t(), gh, 0.0, dv.view_mut().cols_block(h * dh, dh));
                    }
                    if dq.is_none() && dk.is_none() {
                        continue;
                    }
                    {
                        let dpm = crate::tensor::MatMut {
                            data: &mut dp,
                            offset: 0,
                            rows: s,
                            cols: t,
                            rs: t as isize,
                            cs: 1,
                        };
                        gemm(1.0, gh, vv.view().cols_block(h * dh, dh).t(), 0.0, dpm);
                    }
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), reused in place
                    for i in 0..s {
                        let prow = &p[i * t..(i + 1) * t];
                        let drow = &mut dp[i * t..(i + 1) * t];
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dd, pp) in drow.iter_mut().zip(prow) {
                            *dd = pp * (*dd - dot);
                        }
                    }
                    let ds = crate::tensor::MatRef {
                        data: &dp,
                        offset: 0,
                        rows: s,
                        cols: t,
                        rs: t as isize,
                        cs: 1,
                    };
                    if let Some(dq) = dq.as_mut() {
                        gemm(
                            scale,
                            ds,
                            kv.view().cols_block(h * dh, dh),
                            0.0,
                            dq.view_mut().cols_block(h * dh, dh),
                        );
                    }
                    if let Some(dk) = dk.as_mut() {
                        gemm(
                            scale,
                            ds.t(),
                            qv.view().cols_block(h * dh, dh),
                            0.0,
                            dk.view_mut().cols_block(h * dh, dh),
                        );
                    }
                }
                if let Some(t) = dq {
                    self.acc(grads, q, t);
                }
                if let Some(t) = dk {
                    self.acc(grads, k, t);
                }
                if let Some(t) = dv {
                    self.acc(grads, v, t);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                self.acc_with(grads, table, |buf, _| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, s) in buf.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            &Op::SliceRows { a, start } => {
                self.acc_with(grads, a, |buf, _| {
                    let cols = g.cols();
                    let dst = &mut buf.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                self.acc_with(grads, *a, |buf, _| {
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, s) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let gs = g.item();
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(i);
                    row[t] -= 1.0;
                }
                dl.scale_in_place(gs);
                self.acc(grads, *logits, dl);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.acc(grads, a, Tensor::full(r, c, g.item()));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, Tensor::scalar(w * g.item()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: Vec<Tensor>) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            (g.value(out).item(), g, vars, out)
        };
        let (_, g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[n])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-5, "input {n} elem {i}: analytic {a} numeric {num}");
            }
        }
    }

    fn rnd(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        check(
            |g, v| {
                let m = g.matmul_t(v[0], v[1]);
                let m2 = g.matmul(m, v[2]);
                let s = g.silu(m2);
                let p = g.mul(s, v[3]);
                let b = g.add_row(p, v[4]);
                let d = g.sub(b, v[3]);
                let sc = g.scale(d, 0.7);
                g.sum_all(sc)
            },
            vec![rnd(3, 4, 1), rnd(5, 4, 2), rnd(5, 2, 3), rnd(3, 2, 4), rnd(1, 2, 5)],
        );
    }

    #[test]
    fn norm_and_cross_entropy_gradients() {
        check(
            |g, v| {
                let n = g.rms_norm(v[0], v[1], 1e-5);
                let logits = g.matmul_t(n, v[2]);
                g.cross_entropy_sum(logits, &[0, 2, 1])
            },
            vec![rnd(3, 4, 6), rnd(1, 4, 7), rnd(3, 4, 8)],
        );
    }

    #[test]
    fn attention_gradients_causal_with_cache_and_full() {
        for mask in [AttnMask::Full, AttnMask::Causal { offset: 2 }] {
            check(
                move |g, v| {
                    let a = g.attention(v[0], v[1], v[2], 2, mask);
                    let w = g.mul(a, v[3]);
                    g.sum_all(w)
                },
                vec![rnd(3, 4, 9), rnd(5, 4, 10), rnd(5, 4, 11), rnd(3, 4, 12)],
            );
        }
    }

    #[test]
    fn structural_op_gradients() {
        check(
            |g, v| {
                let e = g.embedding(v[0], &[1, 1, 3]);
                let c = g.concat_rows(&[e, v[1]]);
                let s = g.slice_rows(c, 1, 3);
                let r = g.gather_rows(s, &[2, 0, 0]);
                let w = g.mul(r, v[2]);
                let t = g.sum_all(w);
                let t2 = g.sum_all(v[1]);
                g.weighted_sum(&[(t, 0.3), (t2, -1.5)])
            },
            vec![rnd(4, 2, 13), rnd(2, 2, 14), rnd(3, 2, 15)],
        );
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut g = Graph::new();
        let q = g.constant(rnd(3, 4, 1));
        let k = g.constant(rnd(3, 4, 2));
        let v = g.constant(rnd(3, 4, 3));
        let a = g.attention(q, k, v, 2, AttnMask::Causal { offset: 0 });
        let mut v2 = rnd(3, 4, 3);
        v2.row_mut(2).iter_mut().for_each(|x| *x += 10.0);
        let v2 = g.constant(v2);
        let b = g.attention(q, k, v2, 2, AttnMask::Causal { offset: 0 });
        assert_eq!(g.value(a).row(0), g.value(b).row(0));
        assert_eq!(g.value(a).row(1), g.value(b).row(1));
        assert_ne!(g.value(a).row(2), g.value(b).row(2));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(rnd(2, 2, 1));
        let x = g.leaf(rnd(3, 2, 2), true);
        let y = g.matmul_t(x, w);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }
}
