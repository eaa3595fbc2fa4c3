//! Layer primitives with hand-written backward passes.
//!
//! Every function works on 2-D `[rows × features]` tensors. Backward functions
//! return the input gradient and *accumulate* parameter gradients into the
//! supplied buffers.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::ops::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place};
use super::Tensor;

/// `y = x·W + b` with `W: [in × out]`, `b: [out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if b.len() != y.cols() {
        return Err(shape_err!("linear bias has {} entries, expected {}", b.len(), y.cols()));
    }
    for r in 0..y.rows() {
        for (o, &bv) in y.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    dw.add_assign(&matmul_tn(x, dy)?)?;
    for r in 0..dy.rows() {
        for (g, &d) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    matmul_nt(dy, w)
}

/// Saved activations for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if d == 0 {
        return Err(shape_err!("layer_norm: empty feature axis"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err!(
            "layer_norm: gamma/beta of length {}/{} for {d} features",
            gamma.len(),
            beta.len()
        ));
    }
    let n = T::of(d as f64);
    let mut y = x.clone();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let denom = var + eps;
        let rs = if denom > T::zero() {
            T::one() / denom.sqrt()
        } else {
            T::zero()
        };
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for (((o, h), &g), &b) in y.row_mut(r).iter_mut().zip(xh).zip(gamma.data()).zip(beta.data()) {
            *o = h * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let d = dy.cols();
    let n = T::of(d as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            dgamma.data_mut()[j] += g[j] * xh[j];
            dbeta.data_mut()[j] += g[j];
            dxhat[j] = g[j] * gamma.data()[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
        let mean_dxhat_xhat = dot(&dxhat, xh) / n;
        let rs = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok(dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GeLU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// Attention probabilities saved for the backward pass, `[heads × nq × nk]`.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    probs: Vec<T>,
    nq: usize,
    nk: usize,
    heads: usize,
}

impl<T: Scalar> AttentionCache<T> {
    pub fn prob(&self, head: usize, i: usize, j: usize) -> T {
        self.probs[(head * self.nq + i) * self.nk + j]
    }
}

/// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
///
/// `allowed(i, j)` says whether query `i` may attend to key `j`. Queries with no
/// allowed key produce a zero output row.
pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (nq, nk, h) = (q.rows(), k.rows(), q.cols());
    if k.cols() != h || v.cols() != h || v.rows() != nk {
        return Err(shape_err!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || h % heads != 0 {
        return Err(shape_err!("attention: width {h} not divisible by {heads} heads"));
    }
    let dh = h / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[nq, h]);
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut scores = Vec::with_capacity(nk);
    let mut keys = Vec::with_capacity(nk);
    for i in 0..nq {
        keys.clear();
        keys.extend((0..nk).filter(|&j| allowed(i, j)));
        if keys.is_empty() {
            continue;
        }
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let qi = &q.row(i)[cols.clone()];
            scores.clear();
            scores.extend(keys.iter().map(|&j| dot(qi, &k.row(j)[cols.clone()]) * scale));
            softmax_in_place(&mut scores);
            let prow = &mut probs[(hd * nq + i) * nk..(hd * nq + i + 1) * nk];
            for (&j, &p) in keys.iter().zip(&scores) {
                prow[j] = p;
            }
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (&j, &p) in keys.iter().zip(&scores) {
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok((out, AttentionCache { probs, nq, nk, heads }))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    dout: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (nq, nk, heads) = (cache.nq, cache.nk, cache.heads);
    let h = q.cols();
    let dh = h / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); nk];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..nq {
            let prow = &cache.probs[(hd * nq + i) * nk..(hd * nq + i + 1) * nk];
            let go = &dout.row(i)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..nk {
                if prow[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                dp[j] = dot(go, &v.row(j)[cols.clone()]);
                weighted += prow[j] * dp[j];
                for (d, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *d += prow[j] * g;
                }
            }
            for j in 0..nk {
                if prow[j] == T::zero() {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                for (d, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                    *d += ds * kv;
                }
                for (d, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&q.row(i)[cols.clone()]) {
                    *d += ds * qv;
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Row gather: `out[r] = table[ids[r]]`.
pub fn embedding_forward<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let h = table.cols();
    let mut out = Tensor::zeros(&[ids.len(), h]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(shape_err!("embedding id {id} outside table of {} rows", table.rows()));
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub fn embedding_backward<T: Scalar>(dy: &Tensor<T>, ids: &[usize], dtable: &mut Tensor<T>) {
    for (r, &id) in ids.iter().enumerate() {
        for (g, &d) in dtable.row_mut(id).iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
}
