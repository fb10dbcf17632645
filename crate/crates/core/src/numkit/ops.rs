//! Forward kernels shared by the tape and by tape-free callers.

use super::{NumError, Tensor};
use crate::scalar::{gemm, Scalar};

/// Layer-norm epsilon; `sigma = sqrt(var + LN_EPS)`.
pub const LN_EPS: f64 = 1e-5;

pub(crate) fn ensure_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(), NumError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

fn matrix_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), NumError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(NumError::Shape {
            op,
            detail: format!("expected a matrix, got shape {:?}", t.shape()),
        }),
    }
}

/// `a [m x k] . b [k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul",
            detail: format!("inner extents {k} and {k2} differ"),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
    Ok(out)
}

/// `a [m x k] . b^T` where `b` is stored `[n x k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (m, k) = matrix_dims("matmul_nt", a)?;
    let (n, k2) = matrix_dims("matmul_nt", b)?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul_nt",
            detail: format!("inner extents {k} and {k2} differ"),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), true, out.data_mut(), false);
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    let inv = T::one() / total;
    out.iter_mut().for_each(|o| *o = *o * inv);
}

/// Softmax over the trailing axis, max-subtracted.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let v = z.last_dim();
    if z.shape().is_empty() || v == 0 {
        return Err(NumError::Shape {
            op: "softmax",
            detail: "empty last axis".into(),
        });
    }
    let mut out = Tensor::zeros(z.shape());
    for (src, dst) in z.data().chunks(v).zip(out.data_mut().chunks_mut(v)) {
        softmax_row(src, dst);
    }
    ensure_finite("softmax", &out)?;
    Ok(out)
}

/// Result of [`layer_norm_core`]: `(h - mu) / sigma` plus per-row statistics.
#[derive(Debug, Clone)]
pub struct LayerNormOutput<T> {
    pub normalized: Tensor<T>,
    pub mean: Vec<T>,
    pub sigma: Vec<T>,
}

pub fn layer_norm_core<T: Scalar>(h: &Tensor<T>, eps: f64) -> Result<LayerNormOutput<T>, NumError> {
    let (n, d) = matrix_dims("layer_norm", h)?;
    if d < 2 {
        return Err(NumError::Shape {
            op: "layer_norm",
            detail: format!("hidden width {d} < 2"),
        });
    }
    let eps = T::from_f64_lossy(eps);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut normalized = Tensor::zeros(&[n, d]);
    let mut mean = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (src, dst) in h.data().chunks(d).zip(normalized.data_mut().chunks_mut(d)) {
        let mu = src.iter().copied().sum::<T>() * inv_d;
        let var = src.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv_d;
        let s = (var + eps).sqrt();
        let inv = T::one() / s;
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = (x - mu) * inv;
        }
        mean.push(mu);
        sigma.push(s);
    }
    ensure_finite("layer_norm", &normalized)?;
    Ok(LayerNormOutput {
        normalized,
        mean,
        sigma,
    })
}

/// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let out = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )?;
    ensure_finite("gelu", &out)?;
    Ok(out)
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub(crate) fn check_targets<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    position_mask: &[bool],
) -> Result<(usize, usize), NumError> {
    let (n, v) = matrix_dims("cross_entropy", logits)?;
    if targets.len() != n || position_mask.len() != n {
        return Err(NumError::Shape {
            op: "cross_entropy",
            detail: format!(
                "{n} rows but {} targets and {} mask flags",
                targets.len(),
                position_mask.len()
            ),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(NumError::Index {
            op: "cross_entropy",
            index: bad as usize,
            bound: v,
        });
    }
    Ok((n, v))
}

/// Per-position `-log softmax(z_i)[target_i]` where the mask is set, else 0.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    position_mask: &[bool],
) -> Result<Tensor<T>, NumError> {
    let (n, v) = check_targets(logits, targets, position_mask)?;
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        if position_mask[i] {
            let row = &logits.data()[i * v..(i + 1) * v];
            out.data_mut()[i] = log_sum_exp(row) - row[targets[i] as usize];
        }
    }
    ensure_finite("cross_entropy", &out)?;
    Ok(out)
}
