//! Dense kernels: matmul variants, cosine, row softmax, scaled dot-product
//! attention. Forward passes live here; composite backward passes are written
//! where the composites live (see `matcher`).

use crate::error::{AsclError, Result};
use crate::numerics::Mat;

/// Norm floor used inside cosine denominators on the training path.
pub const COSINE_NORM_EPS: f64 = 1e-12;

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Cosine similarity, rejecting zero-norm inputs.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(AsclError::shape(format!(
            "cosine of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(AsclError::DegenerateVector(
            "cosine of a zero-norm vector".into(),
        ));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Cosine with norm denominators floored at [`COSINE_NORM_EPS`].
///
/// Used on the differentiable training path, where a zero-norm fused vector
/// should not abort the run.
#[inline]
pub fn cosine_clamped(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x).max(COSINE_NORM_EPS);
    let ny = norm(y).max(COSINE_NORM_EPS);
    dot(x, y) / (nx * ny)
}

/// C = A·B.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return Err(AsclError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, inner, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &av) in arow.iter().enumerate().take(inner) {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// C = A·Bᵀ.
pub fn matmul_transpose_b(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(AsclError::shape(format!(
            "matmul_transpose_b {}x{} by ({}x{})ᵀ",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate().take(n) {
            *o = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// C = Aᵀ·B. The workhorse for projection-weight gradients.
pub fn matmul_transpose_a(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(AsclError::shape(format!(
            "matmul_transpose_a ({}x{})ᵀ by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = Mat::zeros(m, n);
    for k in 0..a.rows() {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let _ = m;
    Ok(out)
}

/// Row-wise tempered softmax with max-subtraction stabilization.
pub fn softmax_rows(logits: &Mat, temperature: f64) -> Result<Mat> {
    if temperature <= 0.0 {
        return Err(AsclError::config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_row_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

#[inline]
pub(crate) fn softmax_row_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of row softmax: given the forward output and dL/d(output),
/// returns dL/d(logits) for unit temperature.
pub(crate) fn softmax_rows_backward(probs: &Mat, d_probs: &Mat) -> Mat {
    let mut out = Mat::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner = dot(p, dp);
        let orow = out.row_mut(r);
        for ((o, &pv), &dv) in orow.iter_mut().zip(p).zip(dp) {
            *o = pv * (dv - inner);
        }
    }
    out
}

/// Scaled dot-product attention: softmax(Q·Kᵀ/√d)·V.
pub fn sdp_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    if q.cols() != k.cols() {
        return Err(AsclError::shape(format!(
            "attention query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(AsclError::shape(format!(
            "attention key count {} != value count {}",
            k.rows(),
            v.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_transpose_b(q, k)?;
    for s in scores.data_mut() {
        *s *= scale;
    }
    let weights = softmax_rows(&scores, 1.0)?;
    matmul(&weights, v)
}
