//! Central finite differences: the gradient oracle every hand-written
//! backward pass is checked against.

use crate::error::{AsclError, Result};
use crate::numerics::{Grad, Mat};

/// Central-difference gradient of a scalar function of one matrix.
///
/// Perturbs every entry by ±h and evaluates `(f(x+h) - f(x-h)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Mat) -> Result<f64>,
    at: &Mat,
    h: f64,
) -> Result<Grad> {
    if h <= 0.0 {
        return Err(AsclError::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = at.clone();
    let mut grad = Grad::zeros_like(at);
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let orig = probe.get(r, c);
            probe.set(r, c, orig + h)?;
            let up = f(&probe)?;
            probe.set(r, c, orig - h)?;
            let down = f(&probe)?;
            probe.set(r, c, orig)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(AsclError::NumericError(format!(
                    "non-finite function value while probing entry ({r},{c})"
                )));
            }
            grad.add_at(r, c, (up - down) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Relative error between an analytic and a finite-difference value,
/// floored so structurally-zero gradients do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Max relative error over two gradient buffers of equal shape.
pub fn max_relative_error(analytic: &Grad, numeric: &Grad) -> f64 {
    debug_assert_eq!(analytic.data().len(), numeric.data().len());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
