//! Asymmetry-sensitive contrastive objective and the triplet baseline.
//!
//! Pair scores arrive as N x N matrices. For each in-batch pair the loss is
//! the negative log of two softmax fractions: one ranking the positive
//! against in-batch negative images, one ranking it against in-batch negative
//! texts plus alpha-gated generated negatives. Values are means over the
//! batch; every log-sum-exp is max-stabilized. Pure functions of the score
//! arrays; thread-safe.

use crate::error::{AsclError, Result};
use crate::numerics::Mat;

/// Per-generated-negative keep mask.
///
/// `alpha[i][n]` is 0 iff the generated negative outscores the positive pair
/// (`s_gen[i][n] > s_pos[i]`, strictly); ties keep the negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    mask: Mat,
}

impl AlphaMask {
    #[inline]
    pub fn keep(&self, i: usize, n: usize) -> bool {
        self.mask.get(i, n) != 0.0
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mask
    }
}

/// Builds the keep mask from generated-negative scores and positive scores.
pub fn alpha_gate(s_gen: &Mat, s_pos: &[f64]) -> Result<AlphaMask> {
    if s_gen.rows() != s_pos.len() {
        return Err(AsclError::shape(format!(
            "alpha gate: {} generated rows vs {} positives",
            s_gen.rows(),
            s_pos.len()
        )));
    }
    let mask = Mat::from_fn(s_gen.rows(), s_gen.cols(), |i, n| {
        if s_gen.get(i, n) > s_pos[i] {
            0.0
        } else {
            1.0
        }
    })?;
    Ok(AlphaMask { mask })
}

/// Score arrays for one batch of N pairs.
#[derive(Debug, Clone)]
pub struct LossBatchInputs {
    /// Positive scores S(I_i, T_i), length N.
    pub s_pos: Vec<f64>,
    /// s_it[i][j] = S(I_i, T_j).
    pub s_it: Mat,
    /// Transpose view: s_ti[i][j] = S(I_j, T_i).
    pub s_ti: Mat,
    /// s_gen[i][n] = S(I_i, generated negative n), when generated negatives
    /// are in play.
    pub s_gen: Option<Mat>,
    pub tau: f64,
}

impl LossBatchInputs {
    pub fn new(
        s_pos: Vec<f64>,
        s_it: Mat,
        s_ti: Mat,
        s_gen: Option<Mat>,
        tau: f64,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(AsclError::config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let n = s_pos.len();
        if s_it.rows() != n || s_it.cols() != n || s_ti.rows() != n || s_ti.cols() != n {
            return Err(AsclError::shape(
                "loss inputs must be NxN with N positives".to_string(),
            ));
        }
        for (i, &sp) in s_pos.iter().enumerate() {
            if (s_it.get(i, i) - sp).abs() > 1e-9 || (s_ti.get(i, i) - sp).abs() > 1e-9 {
                return Err(AsclError::config(format!(
                    "diagonal of score matrices must equal the positive scores (pair {i})"
                )));
            }
        }
        if let Some(g) = &s_gen {
            if g.rows() != n {
                return Err(AsclError::shape(
                    "generated-negative matrix must have one row per pair".to_string(),
                ));
            }
        }
        Ok(LossBatchInputs {
            s_pos,
            s_it,
            s_ti,
            s_gen,
            tau,
        })
    }

    /// Builds the inputs from one canonical score matrix (rows = images,
    /// columns = texts), deriving positives from the diagonal and the
    /// transpose view.
    pub fn from_score_matrix(s_it: Mat, s_gen: Option<Mat>, tau: f64) -> Result<Self> {
        if s_it.rows() != s_it.cols() {
            return Err(AsclError::shape(format!(
                "score matrix must be square, got {}x{}",
                s_it.rows(),
                s_it.cols()
            )));
        }
        let s_pos: Vec<f64> = (0..s_it.rows()).map(|i| s_it.get(i, i)).collect();
        let s_ti = s_it.transpose();
        LossBatchInputs::new(s_pos, s_it, s_ti, s_gen, tau)
    }

    pub fn batch_size(&self) -> usize {
        self.s_pos.len()
    }
}

/// Gradients of a loss value with respect to every input score array,
/// treating the arrays as independent variables.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub d_s_pos: Vec<f64>,
    pub d_s_it: Mat,
    pub d_s_ti: Mat,
    pub d_s_gen: Option<Mat>,
}

impl LossGrads {
    fn zeros(n: usize, gen_cols: Option<usize>) -> Self {
        LossGrads {
            d_s_pos: vec![0.0; n],
            d_s_it: Mat::zeros(n, n),
            d_s_ti: Mat::zeros(n, n),
            d_s_gen: gen_cols.map(|c| Mat::zeros(n, c)),
        }
    }

    /// Folds the per-array gradients onto the canonical layout where entry
    /// (i, j) is d(loss)/d S(I_i, T_j); second element is d(loss)/d s_gen.
    pub fn collapse(&self) -> (Mat, Option<Mat>) {
        let n = self.d_s_pos.len();
        let mut d = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut v = self.d_s_it.get(i, j) + self.d_s_ti.get(j, i);
                if i == j {
                    v += self.d_s_pos[i];
                }
                d.data_mut()[i * n + j] = v;
            }
        }
        (d, self.d_s_gen.clone())
    }

    fn scale(&mut self, factor: f64) {
        for v in self.d_s_pos.iter_mut() {
            *v *= factor;
        }
        for v in self.d_s_it.data_mut() {
            *v *= factor;
        }
        for v in self.d_s_ti.data_mut() {
            *v *= factor;
        }
        if let Some(g) = &mut self.d_s_gen {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Stabilized log-sum-exp returning the softmax probabilities as well.
fn log_sum_exp(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    (max + sum.ln(), probs)
}

/// Shared core of both contrastive terms.
#[allow(clippy::needless_range_loop)]
fn ascl_core(inputs: &LossBatchInputs) -> Result<(f64, LossGrads)> {
    let n = inputs.batch_size();
    if n == 0 {
        return Err(AsclError::config("loss needs at least one pair"));
    }
    let tau = inputs.tau;
    let alpha = inputs
        .s_gen
        .as_ref()
        .map(|g| alpha_gate(g, &inputs.s_pos))
        .transpose()?;
    let mut grads = LossGrads::zeros(n, inputs.s_gen.as_ref().map(Mat::cols));
    let mut total = 0.0;
    let inv_n_tau = 1.0 / (n as f64 * tau);

    for i in 0..n {
        let z = inputs.s_pos[i] / tau;

        // Fraction 1: positive against in-batch negative images.
        let mut logits1 = Vec::with_capacity(n);
        let mut idx1 = Vec::with_capacity(n);
        logits1.push(z);
        idx1.push(usize::MAX);
        for j in 0..n {
            if j != i {
                logits1.push(inputs.s_ti.get(i, j) / tau);
                idx1.push(j);
            }
        }
        let (lse1, probs1) = log_sum_exp(&logits1);
        total += lse1 - z;
        grads.d_s_pos[i] += (probs1[0] - 1.0) * inv_n_tau;
        for (p, &j) in probs1.iter().zip(&idx1).skip(1) {
            grads.d_s_ti.data_mut()[i * n + j] += p * inv_n_tau;
        }

        // Fraction 2: positive against in-batch negative texts plus gated
        // generated negatives.
        let gen_cols = inputs.s_gen.as_ref().map_or(0, Mat::cols);
        let mut logits2 = Vec::with_capacity(n + gen_cols);
        let mut idx2 = Vec::with_capacity(n + gen_cols);
        logits2.push(z);
        idx2.push((usize::MAX, false));
        for j in 0..n {
            if j != i {
                logits2.push(inputs.s_it.get(i, j) / tau);
                idx2.push((j, false));
            }
        }
        if let (Some(gen), Some(mask)) = (&inputs.s_gen, &alpha) {
            for g in 0..gen.cols() {
                if mask.keep(i, g) {
                    logits2.push(gen.get(i, g) / tau);
                    idx2.push((g, true));
                }
            }
        }
        let (lse2, probs2) = log_sum_exp(&logits2);
        total += lse2 - z;
        grads.d_s_pos[i] += (probs2[0] - 1.0) * inv_n_tau;
        for (p, &(j, is_gen)) in probs2.iter().zip(&idx2).skip(1) {
            if is_gen {
                if let Some(g) = &mut grads.d_s_gen {
                    let cols = g.cols();
                    g.data_mut()[i * cols + j] += p * inv_n_tau;
                }
            } else {
                grads.d_s_it.data_mut()[i * n + j] += p * inv_n_tau;
            }
        }
    }

    Ok((total / n as f64, grads))
}

/// Contrastive term for generated-noise negatives (original positives).
pub fn loss_asym1(inputs: &LossBatchInputs) -> Result<(f64, LossGrads)> {
    ascl_core(inputs)
}

/// Contrastive term for generated positives: structurally identical, with the
/// positive pair replaced by (I, T+) and generated negatives by noised
/// positives. The caller builds the inputs from those scores.
pub fn loss_asym23(inputs: &LossBatchInputs) -> Result<(f64, LossGrads)> {
    ascl_core(inputs)
}

/// Equal-weight combination of the two terms.
pub fn loss_total(l1: f64, l23: f64) -> f64 {
    0.5 * l1 + 0.5 * l23
}

/// Combines the two terms and rescales their gradients in place to match.
pub fn loss_total_with_grads(
    l1: f64,
    mut g1: LossGrads,
    l23: f64,
    mut g23: LossGrads,
) -> (f64, LossGrads, LossGrads) {
    g1.scale(0.5);
    g23.scale(0.5);
    (loss_total(l1, l23), g1, g23)
}

/// Hinge loss with the hardest in-batch negative per row and per column,
/// averaged over pairs. Returns the gradient in the canonical layout.
pub fn triplet_loss(s_it: &Mat, margin: f64) -> Result<(f64, Mat)> {
    if margin <= 0.0 {
        return Err(AsclError::config("triplet margin must be positive"));
    }
    let n = s_it.rows();
    if s_it.cols() != n || n < 2 {
        return Err(AsclError::shape(
            "triplet loss needs a square matrix with at least two pairs".to_string(),
        ));
    }
    let mut total = 0.0;
    let mut grad = Mat::zeros(n, n);
    let inv_n = 1.0 / n as f64;
    // Ties break toward the lower index for determinism.
    let hardest_row = |i: usize| {
        (0..n)
            .filter(|&j| j != i)
            .fold(None::<(usize, f64)>, |best, j| match best {
                Some((_, bv)) if s_it.get(i, j) <= bv => best,
                _ => Some((j, s_it.get(i, j))),
            })
            .expect("n >= 2")
    };
    let hardest_col = |i: usize| {
        (0..n)
            .filter(|&j| j != i)
            .fold(None::<(usize, f64)>, |best, j| match best {
                Some((_, bv)) if s_it.get(j, i) <= bv => best,
                _ => Some((j, s_it.get(j, i))),
            })
            .expect("n >= 2")
    };
    for i in 0..n {
        let (j_row, row_max) = hardest_row(i);
        let hinge_row = row_max - s_it.get(i, i) + margin;
        if hinge_row > 0.0 {
            total += hinge_row;
            grad.data_mut()[i * n + j_row] += inv_n;
            grad.data_mut()[i * n + i] -= inv_n;
        }
        let (j_col, col_max) = hardest_col(i);
        let hinge_col = col_max - s_it.get(i, i) + margin;
        if hinge_col > 0.0 {
            total += hinge_col;
            grad.data_mut()[j_col * n + i] += inv_n;
            grad.data_mut()[i * n + i] -= inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_square(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn alpha_gate_rules() {
        // All generated negatives far below the positives: keep everything.
        let gen = Mat::from_fn(2, 2, |_, _| -1.0).unwrap();
        let mask = alpha_gate(&gen, &[1.0, 1.0]).unwrap();
        assert!(mask.as_mat().data().iter().all(|&v| v == 1.0));

        // Tie keeps (strict "exceeds").
        let gen = Mat::from_vec(1, 1, vec![0.5]).unwrap();
        let mask = alpha_gate(&gen, &[0.5]).unwrap();
        assert!(mask.keep(0, 0));

        // Outsourcing negative above the positive is dropped.
        let gen = Mat::from_vec(1, 1, vec![0.9]).unwrap();
        let mask = alpha_gate(&gen, &[0.5]).unwrap();
        assert!(!mask.keep(0, 0));
    }

    #[test]
    fn single_pair_without_negatives_has_zero_loss() {
        let inputs =
            LossBatchInputs::from_score_matrix(Mat::from_vec(1, 1, vec![0.7]).unwrap(), None, 1.0)
                .unwrap();
        let (value, grads) = loss_asym1(&inputs).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.d_s_pos[0].abs() < 1e-15);
    }

    #[test]
    fn single_pair_with_equal_generated_negative_is_ln_two() {
        // Hand evaluation: both fractions reduce to 1 and 1/2.
        let s = Mat::from_vec(1, 1, vec![0.3]).unwrap();
        let gen = Mat::from_vec(1, 1, vec![0.3]).unwrap();
        let inputs = LossBatchInputs::from_score_matrix(s, Some(gen), 1.0).unwrap();
        let (value, _) = loss_asym1(&inputs).unwrap();
        assert!((value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fully_gated_negatives_match_absent_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_square(&mut rng, 4);
        // Generated scores strictly above every positive: alpha all zero.
        let gen = Mat::from_fn(4, 4, |_, _| 5.0).unwrap();
        let with_gated =
            LossBatchInputs::from_score_matrix(s.clone(), Some(gen), 0.7).unwrap();
        let without = LossBatchInputs::from_score_matrix(s, None, 0.7).unwrap();
        let (v1, _) = loss_asym1(&with_gated).unwrap();
        let (v2, _) = loss_asym1(&without).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn keeping_a_generated_negative_never_decreases_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_square(&mut rng, 3);
            let base = LossBatchInputs::from_score_matrix(s.clone(), None, 0.5).unwrap();
            // Keep-eligible generated negatives (at or below the positives).
            let gen = Mat::from_fn(3, 3, |i, _| s.get(i, i) - rng.gen_range(0.0..0.5)).unwrap();
            let with_gen = LossBatchInputs::from_score_matrix(s, Some(gen), 0.5).unwrap();
            let (v0, _) = loss_asym1(&base).unwrap();
            let (v1, _) = loss_asym1(&with_gen).unwrap();
            assert!(v1 >= v0 - 1e-12, "{v1} < {v0}");
        }
    }

    #[test]
    fn loss_is_nonnegative_and_positive_gradient_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_square(&mut rng, 4);
            let gen = random_square(&mut rng, 4);
            let inputs = LossBatchInputs::from_score_matrix(s, Some(gen), 0.3).unwrap();
            let (v, g) = loss_asym23(&inputs).unwrap();
            assert!(v >= 0.0);
            for i in 0..4 {
                assert!(g.d_s_pos[i] <= 1e-15, "d_s_pos[{i}] = {}", g.d_s_pos[i]);
            }
        }
    }

    #[test]
    fn shift_invariance_under_constant_score_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_square(&mut rng, 5);
        let gen = random_square(&mut rng, 5);
        let base = LossBatchInputs::from_score_matrix(s.clone(), Some(gen.clone()), 0.4).unwrap();
        let (v0, _) = loss_asym1(&base).unwrap();
        for c in [-2.0, 0.37, 10.0] {
            let shift = |m: &Mat| {
                Mat::from_fn(m.rows(), m.cols(), |r, q| m.get(r, q) + c).unwrap()
            };
            let shifted =
                LossBatchInputs::from_score_matrix(shift(&s), Some(shift(&gen)), 0.4).unwrap();
            let (v1, _) = loss_asym1(&shifted).unwrap();
            assert!((v0 - v1).abs() < 1e-10, "offset {c}: {v0} vs {v1}");
        }
    }

    #[test]
    fn temperature_is_a_pure_logit_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_square(&mut rng, 4);
        let gen = random_square(&mut rng, 4);
        let tau = 0.05;
        let a = LossBatchInputs::from_score_matrix(s.clone(), Some(gen.clone()), tau).unwrap();
        let rescale = |m: &Mat| {
            Mat::from_fn(m.rows(), m.cols(), |r, q| m.get(r, q) / tau).unwrap()
        };
        let b = LossBatchInputs::from_score_matrix(rescale(&s), Some(rescale(&gen)), 1.0).unwrap();
        let (va, _) = loss_asym1(&a).unwrap();
        let (vb, _) = loss_asym1(&b).unwrap();
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_mismatched_diagonals() {
        let s = Mat::zeros(2, 2);
        assert!(matches!(
            LossBatchInputs::from_score_matrix(s.clone(), None, 0.0),
            Err(AsclError::ConfigError(_))
        ));
        let bad = LossBatchInputs::new(
            vec![1.0, 1.0],
            Mat::zeros(2, 2),
            Mat::zeros(2, 2),
            None,
            1.0,
        );
        assert!(matches!(bad, Err(AsclError::ConfigError(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 3;
        let s = random_square(&mut rng, n);
        let gen = random_square(&mut rng, n);
        let tau = 0.6;
        let (_, grads) =
            loss_asym1(&LossBatchInputs::from_score_matrix(s.clone(), Some(gen.clone()), tau).unwrap())
                .unwrap();
        let (d_canon, d_gen) = grads.collapse();

        // d/ds_it through the full coupling (diagonal feeds s_pos and the
        // transpose view).
        let fd_s = finite_diff_grad(
            |m| {
                let inputs = LossBatchInputs::from_score_matrix(m.clone(), Some(gen.clone()), tau)?;
                Ok(loss_asym1(&inputs)?.0)
            },
            &s,
            1e-6,
        )
        .unwrap();
        for i in 0..n {
            for j in 0..n {
                let rel = relative_error(d_canon.get(i, j), fd_s.get(i, j));
                assert!(rel <= 1e-6, "d_s[{i}][{j}] rel err {rel}");
            }
        }

        let fd_gen = finite_diff_grad(
            |m| {
                let inputs = LossBatchInputs::from_score_matrix(s.clone(), Some(m.clone()), tau)?;
                Ok(loss_asym1(&inputs)?.0)
            },
            &gen,
            1e-6,
        )
        .unwrap();
        let d_gen = d_gen.unwrap();
        for i in 0..n {
            for j in 0..n {
                let rel = relative_error(d_gen.get(i, j), fd_gen.get(i, j));
                assert!(rel <= 1e-6, "d_gen[{i}][{j}] rel err {rel}");
            }
        }
    }

    #[test]
    fn loss_total_is_the_even_mixture() {
        assert_eq!(loss_total(0.4, 0.4), 0.4);
        assert_eq!(loss_total(0.8, 0.0), 0.4);
        let a = loss_total(1.0, 3.0);
        let b = loss_total(2.0, 3.0);
        assert!((b - a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn triplet_zero_when_diagonal_dominates_by_margin() {
        let s = Mat::from_rows(&[vec![0.9, 0.5], vec![0.2, 0.8]]).unwrap();
        let (v, g) = triplet_loss(&s, 0.2).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.max_abs_diff(&Mat::zeros(2, 2)), 0.0);
    }

    #[test]
    fn triplet_hand_evaluated_hinges() {
        // Flipping s[0][1] to 0.85 activates the row hinge for pair 0
        // (0.85 - 0.9 + 0.2 = 0.15) and the column hinge for pair 1
        // (0.85 - 0.8 + 0.2 = 0.25); averaged over N = 2 pairs: 0.2.
        let s = Mat::from_rows(&[vec![0.9, 0.85], vec![0.2, 0.8]]).unwrap();
        let (v, g) = triplet_loss(&s, 0.2).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        // Row hinge: +1/2 at (0,1), -1/2 at (0,0). Column hinge: +1/2 at
        // (0,1), -1/2 at (1,1).
        assert!((g.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((g.get(0, 0) + 0.5).abs() < 1e-12);
        assert!((g.get(1, 1) + 0.5).abs() < 1e-12);
        assert_eq!(g.get(1, 0), 0.0);
    }

    #[test]
    fn triplet_is_nonnegative_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let s = random_square(&mut rng, 4);
            let margin = 0.3;
            let (v, g) = triplet_loss(&s, margin).unwrap();
            assert!(v >= 0.0);
            let fd = finite_diff_grad(|m| Ok(triplet_loss(m, margin)?.0), &s, 1e-7).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    // Hinge kinks sit exactly at zero; random draws stay away.
                    let rel = relative_error(g.get(i, j), fd.get(i, j));
                    assert!(rel <= 1e-5, "triplet d[{i}][{j}] rel err {rel}");
                }
            }
        }
    }

    #[test]
    fn triplet_rejects_bad_margin() {
        assert!(matches!(
            triplet_loss(&Mat::zeros(2, 2), 0.0),
            Err(AsclError::ConfigError(_))
        ));
    }
}
