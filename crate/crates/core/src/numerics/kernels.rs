//! Elementwise and row-wise kernels with their analytic backward passes.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{PamError, Result};
use crate::numerics::Matrix;

pub const LAYERNORM_EPS: f64 = 1e-5;

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn gelu_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &xi) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d *= gelu_grad(xi);
    }
    dx
}

/// Saved activations for [`layernorm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub input: Matrix,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-row layer normalisation followed by an elementwise affine map.
pub fn layernorm_forward(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
) -> Result<(Matrix, LayerNormCache)> {
    let n = x.cols();
    if n < 2 {
        return Err(PamError::shape("layernorm", "rows need at least 2 entries"));
    }
    if gain.len() != n || bias.len() != n {
        return Err(PamError::shape(
            "layernorm",
            format!("affine length {} / {} for width {n}", gain.len(), bias.len()),
        ));
    }
    let mut normalized = Matrix::zeros(x.rows(), n);
    let mut y = Matrix::zeros(x.rows(), n);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(inv);
        let xhat = normalized.row_mut(r);
        for (h, v) in xhat.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        for ((o, h), (g, b)) in y.row_mut(r).iter_mut().zip(normalized.row(r)).zip(gain.iter().zip(bias)) {
            *o = g * h + b;
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

pub fn layernorm_backward(dy: &Matrix, gain: &[f64], cache: &LayerNormCache) -> LayerNormGrads {
    let n = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), n);
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for r in 0..dy.rows() {
        let g_row = dy.row(r);
        let xhat = cache.normalized.row(r);
        for c in 0..n {
            dgain[c] += g_row[c] * xhat[c];
            dbias[c] += g_row[c];
            dxhat[c] = g_row[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / n as f64;
        let inv = cache.inv_std[r];
        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat) {
            *o = inv * (d - mean_d - h * mean_dx);
        }
    }
    LayerNormGrads {
        input: dx,
        gain: dgain,
        bias: dbias,
    }
}

/// Row-wise unit normalisation. Returns the normalised rows and the original
/// norms. Zero-norm rows are an error rather than being silently floored.
pub fn l2_normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(PamError::Numerical(format!("row {r} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((y, norms))
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy − y·(y·dy)) / |x|`.
pub fn l2_normalize_backward(normalized: &Matrix, norms: &[f64], dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let y = normalized.row(r);
        let g = dy.row(r);
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, yi), gi) in dx.row_mut(r).iter_mut().zip(y).zip(g) {
            *o = (gi - yi * dot) / norms[r];
        }
    }
    dx
}

/// `x + f(x)`; its backward is `dy + df`, composed by the caller.
pub fn residual_add(x: &Matrix, fx: &Matrix) -> Matrix {
    let mut out = x.clone();
    out.add_assign(fx);
    out
}
