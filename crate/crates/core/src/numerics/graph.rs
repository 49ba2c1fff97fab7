//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that transitively depends on a trainable leaf. Nodes with
//! no path to the loss never receive a gradient, which is what makes
//! gradient locality exact rather than approximately zero.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ce_forward, mm_nn, mm_nt, mm_tn};
use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    SumAll(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchedMatMul { a: Var, b: Var, trans_b: bool },
    Embedding { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, gain: Var, xhat: Vec<S>, rstd: Vec<S>, bias: Var },
    Gelu(Var),
    Softmax(Var),
    MaskFill { x: Var, blocked: Vec<bool> },
    SplitHeads { x: Var, batch: usize, len: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, len: usize, heads: usize },
    Mix { weights: Var, xs: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<i32>, probs: Vec<S>, scale: S },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// `None` when the variable is not on any path to the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> Error {
    Error::Shape {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let g = slot.get_or_insert_with(|| vec![S::ZERO; len]);
    f(g);
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape().len() != 1 || vb.len() != vx.cols() {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| v * s).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<S>) -> Result<Var> {
        let vx = self.value(x);
        if c.len() != vx.len() {
            return Err(shape_err("mul_const", vx.shape(), &[c.len()]));
        }
        let out = Tensor::new(vx.shape(), vx.data().iter().zip(&c).map(|(&v, &m)| v * m).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), rg)
    }

    /// `a (.., k) · b (k, n)`, or `a · bᵀ` with `b (n, k)` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 || va.shape().is_empty() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (k, n) = if trans_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if va.cols() != k {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let m = va.rows();
        let mut data = vec![S::ZERO; m * n];
        if trans_b {
            mm_nt(va.data(), vb.data(), &mut data, m, k, n);
        } else {
            mm_nn(va.data(), vb.data(), &mut data, m, k, n);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Affine map with weight stored `(in, out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight, false)?;
        self.add_bias(h, bias)
    }

    /// `a (g, m, k) · b (g, k, n)`, or with `b (g, n, k)` transposed.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batched_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batched_matmul", sa, sb));
        }
        let mut data = vec![S::ZERO; g * m * n];
        for i in 0..g {
            let ai = &va.data()[i * m * k..(i + 1) * m * k];
            let bi = &vb.data()[i * k * n..(i + 1) * k * n];
            let oi = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(ai, bi, oi, m, k, n);
            } else {
                mm_nn(ai, bi, oi, m, k, n);
            }
        }
        let out = Tensor::new(&[g, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::BatchedMatMul { a, b, trans_b }, rg))
    }

    /// Gathers rows of `table (V, d)` into `(ids.len(), d)`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(shape_err("embedding", vt.shape(), &[ids.len()]));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::TokenRange { id, size: rows });
            }
            data.extend_from_slice(&vt.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", vx.shape(), self.value(p).shape()));
            }
        }
        let (xhat, rstd) = kernels::normalize_rows(vx.data(), d, eps);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = xhat.clone();
        for row in data.chunks_mut(d) {
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, xhat, rstd, bias }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| kernels::gelu(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), kernels::softmax_rows(vx.data(), vx.cols())).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Sets blocked entries to -inf.
    pub fn mask_fill(&mut self, x: Var, blocked: Vec<bool>) -> Result<Var> {
        let vx = self.value(x);
        if blocked.len() != vx.len() {
            return Err(shape_err("mask_fill", vx.shape(), &[blocked.len()]));
        }
        let data = vx
            .data()
            .iter()
            .zip(&blocked)
            .map(|(&v, &b)| if b { S::NEG_INFINITY } else { v })
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskFill { x, blocked }, rg))
    }

    /// `(batch·len, heads·dh)` to `(batch·heads, len, dh)`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if vx.rows() != batch * len || heads == 0 || d % heads != 0 {
            return Err(shape_err("split_heads", vx.shape(), &[batch, len, heads]));
        }
        let dh = d / heads;
        let mut data = vec![S::ZERO; vx.len()];
        permute_heads(vx.data(), &mut data, batch, len, heads, dh, false);
        let out = Tensor::new(&[batch * heads, len, dh], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SplitHeads { x, batch, len, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || vx.shape()[0] != batch * heads || vx.shape()[1] != len {
            return Err(shape_err("merge_heads", vx.shape(), &[batch, len, heads]));
        }
        let dh = vx.shape()[2];
        let mut data = vec![S::ZERO; vx.len()];
        permute_heads(vx.data(), &mut data, batch, len, heads, dh, true);
        let out = Tensor::new(&[batch * len, heads * dh], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MergeHeads { x, batch, len, heads }, rg))
    }

    /// `Σ_l weights[l] · xs[l]` for a weight vector of length `xs.len()`.
    pub fn mix(&mut self, weights: Var, xs: &[Var]) -> Result<Var> {
        let vw = self.value(weights);
        if vw.shape() != [xs.len()] || xs.is_empty() {
            return Err(shape_err("mix", vw.shape(), &[xs.len()]));
        }
        let shape = self.shape(xs[0]).to_vec();
        let mut data = vec![S::ZERO; self.value(xs[0]).len()];
        for (&w, &x) in vw.data().iter().zip(xs) {
            let vx = self.value(x);
            if vx.shape() != shape.as_slice() {
                return Err(shape_err("mix", &shape, vx.shape()));
            }
            for (o, &v) in data.iter_mut().zip(vx.data()) {
                *o += w * v;
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(weights) || xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Mix { weights, xs: xs.to_vec() }, rg))
    }

    /// Masked cross-entropy over rows of `logits (.., K)`, returned as a
    /// scalar together with the number of contributing rows. With no
    /// contributing rows the loss is exactly zero and has zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i32], reduction: Reduction) -> Result<(Var, usize)> {
        let vl = self.value(logits);
        let (probs, total, count) = ce_forward(vl.data(), vl.cols(), labels)?;
        let scale = match (count, reduction) {
            (0, _) => 0.0,
            (c, Reduction::Mean) => 1.0 / c as f64,
            (_, Reduction::Sum) => 1.0,
        };
        let out = Tensor::scalar(S::from_f64(total * scale));
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            scale: S::from_f64(scale),
        };
        Ok((self.push(out, op, rg), count))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let root = &self.nodes[loss.0];
        if !root.value.shape().is_empty() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], len(v), |acc| {
                            acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                        });
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| {
                        acc.iter_mut().zip(g).for_each(|(a, &y)| *a += y)
                    });
                }
                if wants(*b) {
                    let cols = len(*b);
                    accumulate(&mut grads[b.0], cols, |acc| {
                        for row in g.chunks(cols) {
                            acc.iter_mut().zip(row).for_each(|(a, &y)| *a += y);
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| {
                        acc.iter_mut().zip(g).for_each(|(a, &y)| *a += y * *s)
                    });
                }
            }
            Op::MulConst(x, c) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| {
                        for ((a, &y), &m) in acc.iter_mut().zip(g).zip(c) {
                            *a += y * m;
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| acc.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = node.value.cols();
                if wants(*a) {
                    accumulate(&mut grads[a.0], va.len(), |acc| {
                        if *trans_b {
                            mm_nn(g, vb.data(), acc, m, n, k);
                        } else {
                            mm_nt(g, vb.data(), acc, m, n, k);
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], vb.len(), |acc| {
                        if *trans_b {
                            mm_tn(g, va.data(), acc, n, m, k);
                        } else {
                            mm_tn(va.data(), g, acc, k, m, n);
                        }
                    });
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = node.value.shape()[2];
                if wants(*a) {
                    accumulate(&mut grads[a.0], va.len(), |acc| {
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &vb.data()[i * k * n..(i + 1) * k * n];
                            let oi = &mut acc[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                mm_nn(gi, bi, oi, m, n, k);
                            } else {
                                mm_nt(gi, bi, oi, m, n, k);
                            }
                        }
                    });
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], vb.len(), |acc| {
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va.data()[i * m * k..(i + 1) * m * k];
                            let oi = &mut acc[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                mm_tn(gi, ai, oi, n, m, k);
                            } else {
                                mm_tn(ai, gi, oi, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    accumulate(&mut grads[table.0], len(*table), |acc| {
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut acc[id as usize * d..(id as usize + 1) * d];
                            dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &y)| *a += y);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, xhat, rstd, bias } => {
                let d = len(*gain);
                let gv = val(*gain).data();
                if wants(*gain) {
                    accumulate(&mut grads[gain.0], d, |acc| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((a, &y), &h) in acc.iter_mut().zip(gr).zip(hr) {
                                *a += y * h;
                            }
                        }
                    });
                }
                if wants(*bias) {
                    accumulate(&mut grads[bias.0], d, |acc| {
                        for gr in g.chunks(d) {
                            acc.iter_mut().zip(gr).for_each(|(a, &y)| *a += y);
                        }
                    });
                }
                if wants(*x) {
                    let nd = S::from_f64(d as f64);
                    accumulate(&mut grads[x.0], len(*x), |acc| {
                        for (((ar, gr), hr), &r) in acc.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                            let mut mean_dh = S::ZERO;
                            let mut mean_dh_h = S::ZERO;
                            for ((&y, &gi), &h) in gr.iter().zip(gv).zip(hr) {
                                let dh = y * gi;
                                mean_dh += dh;
                                mean_dh_h += dh * h;
                            }
                            mean_dh = mean_dh / nd;
                            mean_dh_h = mean_dh_h / nd;
                            for (((a, &y), &gi), &h) in ar.iter_mut().zip(gr).zip(gv).zip(hr) {
                                *a += r * (y * gi - mean_dh - h * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = val(*x).data();
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        for ((a, &y), &v) in acc.iter_mut().zip(g).zip(xv) {
                            *a += y * kernels::gelu_grad(v);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    accumulate(&mut grads[x.0], y.len(), |acc| {
                        for ((ar, gr), yr) in acc.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                            let mut dot = S::ZERO;
                            for (&gi, &yi) in gr.iter().zip(yr) {
                                dot += gi * yi;
                            }
                            for ((a, &gi), &yi) in ar.iter_mut().zip(gr).zip(yr) {
                                *a += yi * (gi - dot);
                            }
                        }
                    });
                }
            }
            Op::MaskFill { x, blocked } => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| {
                        for ((a, &y), &b) in acc.iter_mut().zip(g).zip(blocked) {
                            if !b {
                                *a += y;
                            }
                        }
                    });
                }
            }
            Op::SplitHeads { x, batch, len: n, heads } => {
                if wants(*x) {
                    let dh = node.value.shape()[2];
                    let mut back = vec![S::ZERO; g.len()];
                    permute_heads(g, &mut back, *batch, *n, *heads, dh, true);
                    accumulate(&mut grads[x.0], back.len(), |acc| {
                        acc.iter_mut().zip(&back).for_each(|(a, &y)| *a += y)
                    });
                }
            }
            Op::MergeHeads { x, batch, len: n, heads } => {
                if wants(*x) {
                    let dh = node.value.cols() / heads;
                    let mut back = vec![S::ZERO; g.len()];
                    permute_heads(g, &mut back, *batch, *n, *heads, dh, false);
                    accumulate(&mut grads[x.0], back.len(), |acc| {
                        acc.iter_mut().zip(&back).for_each(|(a, &y)| *a += y)
                    });
                }
            }
            Op::Mix { weights, xs } => {
                let w = val(*weights).data();
                if wants(*weights) {
                    accumulate(&mut grads[weights.0], xs.len(), |acc| {
                        for (a, &x) in acc.iter_mut().zip(xs) {
                            let mut dot = S::ZERO;
                            for (&y, &v) in g.iter().zip(val(x).data()) {
                                dot += y * v;
                            }
                            *a += dot;
                        }
                    });
                }
                for (&wl, &x) in w.iter().zip(xs) {
                    if wants(x) {
                        accumulate(&mut grads[x.0], len(x), |acc| {
                            acc.iter_mut().zip(g).for_each(|(a, &y)| *a += wl * y)
                        });
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs, scale } => {
                if wants(*logits) {
                    let k = val(*logits).cols();
                    let s = g[0] * *scale;
                    accumulate(&mut grads[logits.0], probs.len(), |acc| {
                        for (r, &label) in labels.iter().enumerate() {
                            if label < 0 {
                                continue;
                            }
                            let row = &mut acc[r * k..(r + 1) * k];
                            for (a, &p) in row.iter_mut().zip(&probs[r * k..(r + 1) * k]) {
                                *a += s * p;
                            }
                            row[label as usize] -= s;
                        }
                    });
                }
            }
        }
    }
}

/// Moves between `(batch·len, heads·dh)` and `(batch·heads, len, dh)` layouts.
fn permute_heads<S: Scalar>(src: &[S], dst: &mut [S], batch: usize, len: usize, heads: usize, dh: usize, inverse: bool) {
    let d = heads * dh;
    for b in 0..batch {
        for n in 0..len {
            for h in 0..heads {
                let flat = (b * len + n) * d + h * dh;
                let split = ((b * heads + h) * len + n) * dh;
                let (from, to) = if inverse { (split, flat) } else { (flat, split) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}
