use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::Tensor;

fn check_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("{what}: expected a 2-D tensor, got {s:?}")),
    }
}

/// Matrix product `a · b` for `a: [M×K]`, `b: [K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d(a, "matmul lhs")?;
    let (k2, n) = check_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul: inner dimensions {k} and {k2} differ"));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: [M×K]`, `b: [N×K]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_2d(a, "matmul_nt lhs")?;
    let (n, k2) = check_2d(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_nt: inner dimensions {k} and {k2} differ"));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a: [K×M]`, `b: [K×N]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = check_2d(a, "matmul_tn lhs")?;
    let (k2, n) = check_2d(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_tn: inner dimensions {k} and {k2} differ"));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place max-subtracted softmax over a contiguous slice.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err!("softmax: axis {axis} out of range for {shape:?}"));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(shape_err!("softmax: empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                data[base + j * inner] = b;
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis followed by the `gamma`/`beta` affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(super::layers::layer_norm_forward(x, gamma, beta, eps)?.0)
}
