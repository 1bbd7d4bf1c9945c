//! Slice-level kernels shared by the tape and by plain (untaped) tensor math.
//!
//! Every matrix product accumulates over the inner index in ascending order,
//! so results are reproducible bit-for-bit across call sites.

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &ari) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ari * bv;
            }
        }
    }
}

/// Row-wise softmax over the last dimension with max subtraction.
/// NaN inputs propagate to the whole row.
pub fn softmax_rows_slice(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, |m, v| {
            if v.is_nan() || m.is_nan() {
                f64::NAN
            } else {
                m.max(v)
            }
        });
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows_slice(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU: `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Output of a row-wise layer norm plus what the backward pass needs.
pub struct LayerNormOut {
    pub out: Vec<f64>,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_slice(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> LayerNormOut {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            normalized[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    LayerNormOut {
        out,
        normalized,
        inv_std,
    }
}

// Tensor-level functional API (no tape).

pub fn tensor_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!(
            "matmul inner dimensions differ: {:?} · {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))
}

pub fn tensor_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let cols = *a.shape().last().unwrap_or(&0);
    if cols == 0 {
        return shape_err("softmax over an empty last dimension");
    }
    Tensor::new(a.shape().to_vec(), softmax_rows_slice(a.data(), cols))
}

pub fn tensor_gelu(a: &Tensor) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().map(|&x| gelu_scalar(x)).collect(),
    )
    .expect("same shape")
}

pub fn tensor_layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = *a.shape().last().unwrap_or(&0);
    if d == 0 || gain.numel() != d || bias.numel() != d {
        return shape_err(format!(
            "layer_norm feature size {} vs gain {} / bias {}",
            d,
            gain.numel(),
            bias.numel()
        ));
    }
    let ln = layer_norm_slice(a.data(), d, gain.data(), bias.data());
    Tensor::new(a.shape().to_vec(), ln.out)
}
