//! Tape-based reverse-mode differentiation over [`Tensor`] ops.
//!
//! A [`Tape`] records one forward pass. Leaves are either parameters (which
//! receive gradients) or constants. Each recorded node keeps its output and
//! whatever the backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a reverse topological order because a
//! node can only reference earlier nodes.

use super::ops;
use super::{gemm, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
        seq: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor<T>,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; `None` if it is not a parameter reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(g) => g.add_assign(&contrib),
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward output");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::matmul(self.value(x), self.value(w))?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(y, Op::MatMul(x, w), ng))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = ops::add_bias(self.value(x), self.value(b))?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(y, Op::AddBias(x, b), ng))
    }

    /// `x·w + b` on the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// Adds `y[r, d]` to each consecutive block of `r` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = ops::add_tiled(self.value(x), self.value(y))?;
        let ng = self.needs(x) || self.needs(y);
        Ok(self.push(out, Op::AddTiled(x, y), ng))
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (y, rstd) = ops::layer_norm(self.value(x), eps)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::LayerNorm { x, rstd }, ng))
    }

    /// `x ⊙ gamma + beta`, with one `gamma`/`beta` row per block of rows of `x`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let y = ops::modulate(self.value(x), self.value(gamma), self.value(beta))?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, Op::Modulate { x, gamma, beta }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_cols(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::SliceCols { x, start }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = ops::silu(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Silu(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax(self.value(x));
        let ng = self.needs(x);
        self.push(y, Op::Softmax(x), ng)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize, seq: usize) -> Result<Var> {
        let y = ops::split_heads(self.value(x), heads, seq)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::SplitHeads { x, heads }, ng))
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let y = ops::merge_heads(self.value(x), heads)?;
        let seq = self.value(x).shape()[1];
        let ng = self.needs(x);
        Ok(self.push(y, Op::MergeHeads { x, heads, seq }, ng))
    }

    /// Full (non-causal) attention over `[G, n, dk]` inputs.
    pub fn scaled_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, probs) = ops::scaled_attention(self.value(q), self.value(k), self.value(v))?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, ng))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = ops::mse(self.value(pred), self.value(target))?;
        let ng = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(T::from_f64(l)), Op::Mse(pred, target), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(0.0, |a, v| a + v.as_f64());
        let ng = self.needs(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        wv.data(),
                        true,
                        dx.data_mut(),
                        false,
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(
                        k,
                        m,
                        n,
                        xv.data(),
                        true,
                        g.data(),
                        false,
                        dw.data_mut(),
                        false,
                    );
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    let n = g.last_dim();
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks_exact(n) {
                        for (a, &r) in db.data_mut().iter_mut().zip(row) {
                            *a = *a + r;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::AddTiled(x, y) => {
                if needs(*y) {
                    let yv = val(*y);
                    let mut dy = Tensor::zeros(yv.shape());
                    for chunk in g.data().chunks_exact(yv.len()) {
                        for (a, &r) in dy.data_mut().iter_mut().zip(chunk) {
                            *a = *a + r;
                        }
                    }
                    accumulate(&mut grads[y.0], dy);
                }
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
            }
            Op::LayerNorm { x, rstd } => {
                let dx = ops::layer_norm_backward(&node.value, rstd, g);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Modulate { x, gamma, beta } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let d = xv.last_dim();
                let per = xv.rows() / gv.rows();
                if needs(*x) {
                    let mut dx = g.clone();
                    for (r, row) in dx.data_mut().chunks_exact_mut(d).enumerate() {
                        let gr = &gv.data()[(r / per) * d..(r / per + 1) * d];
                        for (o, &s) in row.iter_mut().zip(gr) {
                            *o = *o * s;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dgamma = Tensor::zeros(gv.shape());
                    let mut dbeta = Tensor::zeros(gv.shape());
                    for (r, (gr, xr)) in g
                        .data()
                        .chunks_exact(d)
                        .zip(xv.data().chunks_exact(d))
                        .enumerate()
                    {
                        let o = (r / per) * d;
                        let dg = &mut dgamma.data_mut()[o..o + d];
                        for ((a, &gj), &xj) in dg.iter_mut().zip(gr).zip(xr) {
                            *a = *a + gj * xj;
                        }
                        let db = &mut dbeta.data_mut()[o..o + d];
                        for (a, &gj) in db.iter_mut().zip(gr) {
                            *a = *a + gj;
                        }
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads[gamma.0], dgamma);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads[beta.0], dbeta);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, len) = (xv.last_dim(), g.last_dim());
                let mut dx = Tensor::zeros(xv.shape());
                for (dst, src) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(g.data().chunks_exact(len))
                {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (o, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o = *o * ops::gelu_grad_scalar(xi);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Silu(x) => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (o, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o = *o * ops::silu_grad_scalar(xi);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Softmax(x) => {
                let mut dx = g.clone();
                let n = node.value.last_dim();
                ops::softmax_backward_in_place(node.value.data(), dx.data_mut(), n);
                accumulate(&mut grads[x.0], dx);
            }
            Op::SplitHeads { x, heads } => {
                let dx = ops::merge_heads(g, *heads).expect("split_heads gradient shape");
                accumulate(&mut grads[x.0], dx);
            }
            Op::MergeHeads { x, heads, seq } => {
                let dx = ops::split_heads(g, *heads, *seq).expect("merge_heads gradient shape");
                accumulate(&mut grads[x.0], dx);
            }
            Op::Attention { q, k, v, probs } => {
                let (dq, dk, dv) =
                    ops::scaled_attention_backward(val(*q), val(*k), val(*v), probs, g);
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        accumulate(&mut grads[var.0], grad);
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let scale = g.data()[0].as_f64() * 2.0 / pv.len() as f64;
                let diff: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(&a, &b)| T::from_f64((a - b).as_f64() * scale))
                    .collect();
                let dp = Tensor::new(pv.shape().to_vec(), diff).unwrap();
                if needs(*t) {
                    accumulate(&mut grads[t.0], dp.map(|v| -v));
                }
                if needs(*p) {
                    accumulate(&mut grads[p.0], dp);
                }
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(&mut grads[x.0], Tensor::full(xv.shape(), g.data()[0]));
            }
        }
    }
}
