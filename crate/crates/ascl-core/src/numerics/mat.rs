//! Dense row-major matrix and gradient buffers.
//!
//! Everything trains in `f64`; `f32` appears only at the feature-file boundary.
//! Non-finite values are rejected at construction so bad data fails fast
//! instead of propagating NaNs through a training run.

use crate::error::{AsclError, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AsclError::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AsclError::NumericError(format!(
                "non-finite value {} at flat index {pos} in {rows}x{cols} matrix",
                data[pos]
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(AsclError::shape("matrix needs at least one row"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(AsclError::shape(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    /// Sets one entry, preserving the finite-values invariant.
    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(AsclError::NumericError(format!(
                "attempted to store non-finite value {v} at ({r},{c})"
            )));
        }
        self.data[r * self.cols + c] = v;
        Ok(())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access for internal kernels; callers keep values finite.
    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for m in &mut mean {
            *m *= inv;
        }
        mean
    }

    /// Returns a copy with the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Mat> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(AsclError::shape(format!(
                    "row index {i} out of bounds for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Mat::from_vec(indices.len(), self.cols, data)
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient buffer with the same shape as the parameter it differentiates.
#[derive(Debug, Clone)]
pub struct Grad {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    accumulated: bool,
}

impl Grad {
    pub fn zeros_like(param: &Mat) -> Self {
        Grad {
            rows: param.rows(),
            cols: param.cols(),
            data: vec![0.0; param.rows() * param.cols()],
            accumulated: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grad {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            accumulated: false,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// True once any contribution has been accrued since the last `zero`.
    pub fn is_accumulated(&self) -> bool {
        self.accumulated
    }

    /// Clears the buffer between optimizer steps.
    pub fn zero(&mut self) {
        self.data.fill(0.0);
        self.accumulated = false;
    }

    /// Adds `scale * contribution` into the buffer.
    pub fn accumulate(&mut self, contribution: &Mat, scale: f64) -> Result<()> {
        if contribution.rows() != self.rows || contribution.cols() != self.cols {
            return Err(AsclError::shape(format!(
                "gradient is {}x{}, contribution is {}x{}",
                self.rows,
                self.cols,
                contribution.rows(),
                contribution.cols()
            )));
        }
        for (g, c) in self.data.iter_mut().zip(contribution.data()) {
            *g += scale * c;
        }
        self.accumulated = true;
        Ok(())
    }

    #[inline]
    pub(crate) fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
        self.accumulated = true;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(matches!(
            Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(AsclError::ShapeError(_))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Mat::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(AsclError::NumericError(_))
        ));
        assert!(matches!(
            Mat::from_vec(1, 2, vec![f64::INFINITY, 0.0]),
            Err(AsclError::NumericError(_))
        ));
    }

    #[test]
    fn set_rejects_non_finite() {
        let mut m = Mat::zeros(1, 1);
        assert!(m.set(0, 0, f64::NEG_INFINITY).is_err());
        assert!(m.set(0, 0, 7.0).is_ok());
        assert_eq!(m.get(0, 0), 7.0);
    }

    #[test]
    fn mean_rows_is_columnwise() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(m.mean_rows(), vec![2.0, 4.0]);
    }

    #[test]
    fn grad_accumulation_flag_tracks_use() {
        let p = Mat::zeros(2, 2);
        let mut g = Grad::zeros_like(&p);
        assert!(!g.is_accumulated());
        g.accumulate(&Mat::from_vec(2, 2, vec![1.0; 4]).unwrap(), 0.5)
            .unwrap();
        assert!(g.is_accumulated());
        assert_eq!(g.data(), &[0.5; 4]);
        g.zero();
        assert!(!g.is_accumulated());
        assert_eq!(g.data(), &[0.0; 4]);
    }

    #[test]
    fn grad_accumulate_rejects_shape_mismatch() {
        let p = Mat::zeros(2, 2);
        let mut g = Grad::zeros_like(&p);
        let bad = Mat::zeros(2, 3);
        assert!(g.accumulate(&bad, 1.0).is_err());
    }
}
