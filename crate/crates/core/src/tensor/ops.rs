//! Forward kernels and their vector-Jacobian products.
//!
//! These operate on plain tensors; [`super::Tape`] records them and calls
//! the matching `*_backward` functions. Tensors of rank > 2 are viewed as
//! `[rows, last_dim]` wherever an op acts on the last axis.

use super::{gemm, Result, Scalar, Tensor, TensorError};

const GELU_COEFF: f64 = 0.044715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// `x[..., k] · w[k, n] -> [..., n]`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape().len() != 2 || x.last_dim() != w.shape()[0] {
        return mismatch("matmul", x.shape(), w.shape());
    }
    let (m, k, n) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, x.data(), false, w.data(), false, &mut out, false);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// Adds `bias[n]` to every row of `x[..., n]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if bias.shape().len() != 1 || bias.len() != x.last_dim() {
        return mismatch("add_bias", x.shape(), bias.shape());
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// `x·w + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_bias(&matmul(x, w)?, b)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return mismatch("add", a.shape(), b.shape());
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// `x[m, d] + y[i mod r]` where `y` is `[r, d]` and `r` divides `m`.
pub fn add_tiled<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if y.last_dim() != d || y.rows() == 0 || !x.rows().is_multiple_of(y.rows()) {
        return mismatch("add_tiled", x.shape(), y.shape());
    }
    let block = y.len();
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_exact_mut(block) {
        for (v, &t) in chunk.iter_mut().zip(y.data()) {
            *v = *v + t;
        }
    }
    Ok(out)
}

/// Per-row normalization to zero mean and unit (population) variance, with
/// `eps` inside the square root. Returns the output and per-row `1/σ`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if d == 0 {
        return Err(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "empty last axis".into(),
        });
    }
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.as_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = T::from_f64((v.as_f64() - mean) * r);
        }
        rstd.push(T::from_f64(r));
    }
    Ok((out, rstd))
}

/// Given the normalized output `y`, per-row `1/σ` and upstream `dy`.
pub fn layer_norm_backward<T: Scalar>(y: &Tensor<T>, rstd: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let inv_d = 1.0 / d as f64;
    let mut dx = Tensor::zeros(y.shape());
    for (((yr, gr), xr), &r) in y
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
        .zip(rstd)
    {
        let mean_g = gr.iter().map(|v| v.as_f64()).sum::<f64>() * inv_d;
        let mean_gy = gr
            .iter()
            .zip(yr)
            .map(|(g, y)| g.as_f64() * y.as_f64())
            .sum::<f64>()
            * inv_d;
        let r = r.as_f64();
        for ((o, &g), &yv) in xr.iter_mut().zip(gr).zip(yr) {
            *o = T::from_f64(r * (g.as_f64() - mean_g - yv.as_f64() * mean_gy));
        }
    }
    dx
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.last_dim();
    if n > 0 {
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `dx = p ⊙ (dp − Σ dp⊙p)` per row, written into `dp`.
pub(crate) fn softmax_backward_in_place<T: Scalar>(p: &[T], dp: &mut [T], n: usize) {
    for (pr, gr) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
        let dot = pr
            .iter()
            .zip(gr.iter())
            .fold(T::zero(), |a, (&p, &g)| a + p * g);
        for (g, &p) in gr.iter_mut().zip(pr) {
            *g = p * (*g - dot);
        }
    }
}

fn tanh_fast<T: Scalar>(u: T) -> T {
    // 1 − 2/(e^{2u} + 1) saturates cleanly for large |u|.
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// GELU with the tanh approximation (cubic coefficient 0.044715).
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_SCALE) * (x + T::from_f64(GELU_COEFF) * x * x * x);
    half * x * (T::one() + tanh_fast(u))
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let (scale, coeff) = (T::from_f64(GELU_SCALE), T::from_f64(GELU_COEFF));
    let u = scale * (x + coeff * x * x * x);
    let th = tanh_fast(u);
    let du = scale * (T::one() + T::from_f64(3.0) * coeff * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

/// `x[g·n + i] ⊙ gamma[g] + beta[g]` for `x: [G·n, d]`, `gamma, beta: [G, d]`.
pub fn modulate<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    let groups = gamma.rows();
    if gamma.last_dim() != d
        || beta.shape() != gamma.shape()
        || groups == 0
        || !x.rows().is_multiple_of(groups)
    {
        return mismatch("modulate", x.shape(), gamma.shape());
    }
    let per = x.rows() / groups;
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let g = r / per;
        let gr = &gamma.data()[g * d..(g + 1) * d];
        let br = &beta.data()[g * d..(g + 1) * d];
        for ((v, &s), &b) in row.iter_mut().zip(gr).zip(br) {
            *v = *v * s + b;
        }
    }
    Ok(out)
}

/// Columns `start..start+len` of `x[..., c]`.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if start + len > c {
        return Err(TensorError::InvalidArgument {
            op: "slice_cols",
            reason: format!("columns {start}..{} out of {c}", start + len),
        });
    }
    let mut data = Vec::with_capacity(x.rows() * len);
    for row in x.data().chunks_exact(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(shape, data)
}

/// `[B·n, H·dk] -> [B·H, n, dk]` with group index `b·H + h`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize, seq: usize) -> Result<Tensor<T>> {
    let width = x.last_dim();
    if heads == 0 || seq == 0 || !width.is_multiple_of(heads) || !x.rows().is_multiple_of(seq) {
        return Err(TensorError::InvalidArgument {
            op: "split_heads",
            reason: format!("shape {:?} with {heads} heads, seq {seq}", x.shape()),
        });
    }
    let (dk, batch) = (width / heads, x.rows() / seq);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..seq {
            let src = &x.data()[(b * seq + i) * width..(b * seq + i + 1) * width];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + i) * dk;
                out[dst..dst + dk].copy_from_slice(&src[h * dk..(h + 1) * dk]);
            }
        }
    }
    Tensor::new(vec![batch * heads, seq, dk], out)
}

/// Inverse of [`split_heads`]: `[B·H, n, dk] -> [B·n, H·dk]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
        return Err(TensorError::InvalidArgument {
            op: "merge_heads",
            reason: format!("shape {s:?} with {heads} heads"),
        });
    }
    let (groups, seq, dk) = (s[0], s[1], s[2]);
    let batch = groups / heads;
    let width = heads * dk;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let src = ((b * heads + h) * seq + i) * dk;
                let dst = (b * seq + i) * width + h * dk;
                out[dst..dst + dk].copy_from_slice(&x.data()[src..src + dk]);
            }
        }
    }
    Tensor::new(vec![batch * seq, width], out)
}

fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s {
        return mismatch("scaled_attention", q.shape(), k.shape());
    }
    Ok((s[0], s[1], s[2]))
}

/// `softmax(QKᵀ/√dk)·V` per group of `[G, n, dk]`. Returns output and the
/// attention probabilities `[G, n, n]`.
pub fn scaled_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (groups, n, dk) = attention_dims(q, k, v)?;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut probs = vec![T::zero(); groups * n * n];
    let mut out = vec![T::zero(); groups * n * dk];
    for g in 0..groups {
        let (qs, ks, vs) = (g * n * dk, g * n * dk, g * n * dk);
        let p = &mut probs[g * n * n..(g + 1) * n * n];
        gemm(
            n,
            dk,
            n,
            &q.data()[qs..],
            false,
            &k.data()[ks..],
            true,
            p,
            false,
        );
        for row in p.chunks_exact_mut(n) {
            for x in row.iter_mut() {
                *x = *x * scale;
            }
            softmax_in_place(row);
        }
        gemm(
            n,
            n,
            dk,
            p,
            false,
            &v.data()[vs..],
            false,
            &mut out[g * n * dk..],
            false,
        );
    }
    Ok((
        Tensor::new(vec![groups, n, dk], out)?,
        Tensor::new(vec![groups, n, n], probs)?,
    ))
}

/// Gradients `(dq, dk, dv)` of [`scaled_attention`].
pub fn scaled_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = q.shape();
    let (groups, n, dk) = (s[0], s[1], s[2]);
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dkk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); n * n];
    for g in 0..groups {
        let o = g * n * dk;
        let p = &probs.data()[g * n * n..(g + 1) * n * n];
        let go = &dout.data()[o..o + n * dk];
        // dV = Pᵀ dO
        gemm(n, n, dk, p, true, go, false, &mut dv[o..o + n * dk], false);
        // dP = dO Vᵀ
        gemm(n, dk, n, go, false, &v.data()[o..], true, &mut dp, false);
        softmax_backward_in_place(p, &mut dp, n);
        for x in dp.iter_mut() {
            *x = *x * scale;
        }
        // dQ = dS K, dK = dSᵀ Q
        gemm(
            n,
            n,
            dk,
            &dp,
            false,
            &k.data()[o..],
            false,
            &mut dq[o..o + n * dk],
            false,
        );
        gemm(
            n,
            n,
            dk,
            &dp,
            true,
            &q.data()[o..],
            false,
            &mut dkk[o..o + n * dk],
            false,
        );
    }
    let shape = s.to_vec();
    (
        Tensor::new(shape.clone(), dq).unwrap(),
        Tensor::new(shape.clone(), dkk).unwrap(),
        Tensor::new(shape, dv).unwrap(),
    )
}

/// Mean of squared differences, accumulated in `f64`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return mismatch("mse_loss", pred.shape(), target.shape());
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}
