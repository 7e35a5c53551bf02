//! Differentiable primitives with hand-written backward rules.
//!
//! Every forward function here has a matching `*_backward` that maps an
//! upstream gradient to gradients of the inputs. The model code composes them
//! in a fixed order; there is no tape.

use crate::error::{Error, Result};
use crate::matrix::{dot, shape_str, Matrix};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!("matmul needs a.cols == b.rows, got {} · {}", shape_str(a), shape_str(b))));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    let bs = b.as_slice();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bs[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul_nt needs a.cols == b.cols, got {} · {}ᵀ",
            shape_str(a),
            shape_str(b)
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul_tn needs a.rows == b.rows, got {}ᵀ · {}",
            shape_str(a),
            shape_str(b)
        )));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    let m = b.cols();
    for r in 0..a.rows() {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.as_mut_slice()[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of `C = A·B`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul_nt(d_out, b)?, matmul_tn(a, d_out)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of [`softmax_rows`] given its output `y`:
/// `dx = y ⊙ (dy − Σ(dy ⊙ y))` per row.
pub fn softmax_rows_backward(y: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    y.check_same_shape(d_out)?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        softmax_row_backward(y.row(r), d_out.row(r), dx.row_mut(r));
    }
    Ok(dx)
}

pub(crate) fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner = dot(y, dy);
    for ((o, &yv), &dv) in dx.iter_mut().zip(y).zip(dy) {
        *o = yv * (dv - inner);
    }
}

/// Saved forward state of a row-wise LayerNorm.
#[derive(Clone, Debug)]
pub struct LnCache {
    /// Standardized rows before the affine transform.
    pub normalized: Matrix,
    /// `1/√(var + eps)` per row.
    pub inv_std: Vec<f64>,
}

/// Row-wise LayerNorm followed by the `gain`/`bias` affine (both 1×cols).
///
/// A constant row standardizes to zero and so maps to `bias`.
pub fn layernorm_rows(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    Ok(layernorm_rows_cached(m, gain, bias, eps)?.0)
}

pub fn layernorm_rows_cached(m: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<(Matrix, LnCache)> {
    let cols = m.cols();
    if gain.shape() != (1, cols) || bias.shape() != (1, cols) {
        return Err(Error::Shape(format!(
            "layernorm affine must be 1x{cols}, got gain {} and bias {}",
            shape_str(gain),
            shape_str(bias)
        )));
    }
    let mut normalized = Matrix::zeros(m.rows(), cols);
    let mut out = Matrix::zeros(m.rows(), cols);
    let mut inv_std = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (n, &v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * istd;
        }
        let orow = out.row_mut(r);
        for c in 0..cols {
            orow[c] = normalized[(r, c)] * gain.as_slice()[c] + bias.as_slice()[c];
        }
    }
    Ok((out, LnCache { normalized, inv_std }))
}

/// Gradients of LayerNorm: returns `(dx, d_gain, d_bias)`.
pub fn layernorm_rows_backward(cache: &LnCache, gain: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    cache.normalized.check_same_shape(d_out)?;
    let (rows, cols) = d_out.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut d_gain = Matrix::zeros(1, cols);
    let mut d_bias = Matrix::zeros(1, cols);
    let mut d_norm = vec![0.0; cols];
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dy = d_out.row(r);
        for c in 0..cols {
            d_gain.as_mut_slice()[c] += dy[c] * xhat[c];
            d_bias.as_mut_slice()[c] += dy[c];
            d_norm[c] = dy[c] * gain.as_slice()[c];
        }
        let sum_d: f64 = d_norm.iter().sum();
        let sum_dx: f64 = dot(&d_norm, xhat);
        let scale = cache.inv_std[r] / n;
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            dxr[c] = scale * (n * d_norm[c] - sum_d - xhat[c] * sum_dx);
        }
    }
    Ok((dx, d_gain, d_bias))
}
