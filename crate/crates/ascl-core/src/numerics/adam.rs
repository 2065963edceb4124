//! Adam update with bias correction, one state buffer per parameter matrix.

use crate::error::{AsclError, Result};
use crate::numerics::{Grad, Mat};

/// Default first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Default second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Default denominator fuzz.
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn zeros_like(param: &Mat) -> Self {
        let n = param.rows() * param.cols();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Applies one bias-corrected Adam step in place.
///
/// `t` is the 1-based step count shared by all parameters of a model.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Mat,
    grad: &Grad,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if grad.rows() != param.rows() || grad.cols() != param.cols() {
        return Err(AsclError::shape(format!(
            "adam parameter is {}x{}, gradient is {}x{}",
            param.rows(),
            param.cols(),
            grad.rows(),
            grad.cols()
        )));
    }
    if state.m.len() != grad.data().len() {
        return Err(AsclError::shape(
            "adam state does not match parameter shape".to_string(),
        ));
    }
    if t < 1 {
        return Err(AsclError::config("adam step count must be >= 1"));
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let data = param.data_mut();
    for ((p, &g), (m, v)) in data
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Mat::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Grad::zeros_like(&p);
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Hand evaluation: m_hat = v_hat = 1 after bias correction, so the
        // first step is lr / (1 + eps).
        let mut p = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let mut g = Grad::zeros_like(&p);
        g.accumulate(&Mat::from_vec(1, 1, vec![1.0]).unwrap(), 1.0)
            .unwrap();
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 1).unwrap();
        assert!((p.get(0, 0) - 1.9).abs() < 1e-8);
    }

    #[test]
    fn identical_parameters_follow_identical_trajectories() {
        let mut p1 = Mat::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let mut p2 = p1.clone();
        let mut s1 = AdamState::zeros_like(&p1);
        let mut s2 = AdamState::zeros_like(&p2);
        for t in 1..=25u64 {
            let mut g = Grad::zeros_like(&p1);
            let gv = Mat::from_vec(1, 2, vec![0.1 * t as f64, -0.03]).unwrap();
            g.accumulate(&gv, 1.0).unwrap();
            adam_step(&mut p1, &g, &mut s1, 0.05, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, t).unwrap();
            adam_step(&mut p2, &g, &mut s2, 0.05, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, t).unwrap();
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Mat::zeros(2, 2);
        let g = Grad::zeros(2, 3);
        let mut st = AdamState::zeros_like(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 1),
            Err(AsclError::ShapeError(_))
        ));
    }
}
