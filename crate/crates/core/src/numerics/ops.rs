//! Forward kernels. The tape reuses these so that plain and differentiable
//! evaluation produce bit-identical values.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which GELU formula to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluMode {
    /// `x * Φ(x)` with the Gaussian CDF.
    #[default]
    Exact,
    /// The `tanh` approximation.
    Tanh,
}

const TANH_COEF: f64 = 0.044715;

/// `c[n×m] = a[n×k] · b[k×m]` into a zeroed buffer.
pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`.
pub(crate) fn matmul_bt_kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * m + j] += acc;
        }
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`.
pub(crate) fn matmul_at_kernel<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); n * m];
    matmul_kernel(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(vec![n, m], out)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T, mode: GeluMode) -> T {
    let half = T::lit(0.5);
    match mode {
        GeluMode::Exact => half * x * (T::one() + (x * T::FRAC_1_SQRT_2()).erf()),
        GeluMode::Tanh => {
            let c = (T::lit(2.0) / T::PI()).sqrt();
            half * x * (T::one() + (c * (x + T::lit(TANH_COEF) * x * x * x)).tanh())
        }
    }
}

#[inline]
pub(crate) fn gelu_derivative<T: Scalar>(x: T, mode: GeluMode) -> T {
    let half = T::lit(0.5);
    match mode {
        GeluMode::Exact => {
            let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
            let pdf = (-half * x * x).exp() / (T::lit(2.0) * T::PI()).sqrt();
            cdf + x * pdf
        }
        GeluMode::Tanh => {
            let c = (T::lit(2.0) / T::PI()).sqrt();
            let a = T::lit(TANH_COEF);
            let t = (c * (x + a * x * x * x)).tanh();
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
    }
}

/// Elementwise GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    gelu_with(x, GeluMode::Exact)
}

pub fn gelu_with<T: Scalar>(x: &Tensor<T>, mode: GeluMode) -> Tensor<T> {
    x.map(|v| gelu_scalar(v, mode))
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise softmax of a matrix (a vector is treated as one row).
pub fn softmax_rows<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.rank() > 2 || s.rank() == 0 {
        return Err(Error::Shape(format!("softmax_rows on shape {:?}", s.shape())));
    }
    let mut out = s.clone();
    out.clear_grad();
    let m = s.cols();
    for row in out.data_mut().chunks_mut(m) {
        softmax_row_in_place(row);
    }
    Ok(out)
}

/// Returns the norm that was used.
pub(crate) fn l2_normalize_in_place<T: Scalar>(v: &mut [T], eps: T) -> T {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let denom = norm + eps;
    for x in v.iter_mut() {
        *x /= denom;
    }
    norm
}

/// `v / (‖v‖₂ + eps)`. The zero vector maps to itself.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut out = v.map(|x| x);
    l2_normalize_in_place(out.data_mut(), eps);
    out
}

/// Normalizes every row of a matrix independently.
pub fn l2_normalize_rows<T: Scalar>(v: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut out = v.map(|x| x);
    let m = v.cols();
    for row in out.data_mut().chunks_mut(m) {
        l2_normalize_in_place(row, eps);
    }
    out
}

/// Zero-mean unit-variance per row, no affine. Returns `1/σ`.
pub(crate) fn layer_norm_row_in_place<T: Scalar>(row: &mut [T], eps: T) -> T {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * inv_std;
    }
    inv_std
}
