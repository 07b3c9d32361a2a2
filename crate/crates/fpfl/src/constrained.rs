//! Differential-multiplier updates: the generic damped solver for
//! equality-constrained minimization, plus the fairness-specialized update
//! built from aggregated surrogate statistics.
//!
//! Update order is fixed: the multiplier moves first, then the parameters
//! use the updated multiplier. A simultaneous update would differ at
//! O(eta*gamma) and is not what this crate does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{all_finite, axpy};

/// Dual state for constrained updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierState {
    /// One multiplier per constraint (per group).
    pub lambda: Vec<f64>,
    /// Multiplier learning rate.
    pub gamma: f64,
    /// Damping weight on the quadratic penalty; 0 disables damping.
    pub c: f64,
    /// Clamp for the sign-free variant only.
    pub lambda_max: Option<f64>,
}

impl MultiplierState {
    pub fn new(constraints: usize, gamma: f64, c: f64) -> Self {
        MultiplierState {
            lambda: vec![0.0; constraints],
            gamma,
            c,
            lambda_max: None,
        }
    }

    pub fn with_lambda_max(mut self, lambda_max: f64) -> Self {
        self.lambda_max = Some(lambda_max);
        self
    }
}

/// Aggregated statistics feeding one fairness-constrained update.
#[derive(Debug, Clone)]
pub struct UpdateInputs {
    /// Gradient of the summed loss, length p.
    pub grad_loss: Vec<f64>,
    /// Loss normalizer n (true, estimated, or noisy sample count).
    pub loss_normalizer: f64,
    /// Per-group surrogate sums F_a.
    pub f_sums: Vec<f64>,
    /// Per-group surrogate gradients, each length p.
    pub grad_f: Vec<Vec<f64>>,
    /// Per-group conditioning-subset counts n'_a (possibly sanitized noise).
    pub counts: Vec<f64>,
    /// Constraint tolerance.
    pub alpha: f64,
}

impl UpdateInputs {
    fn validate(&self) -> Result<()> {
        let p = self.grad_loss.len();
        let r = self.f_sums.len();
        if self.grad_f.len() != r || self.counts.len() != r {
            return Err(Error::DimensionMismatch(
                "per-group blocks have inconsistent lengths".into(),
            ));
        }
        if self.grad_f.iter().any(|g| g.len() != p) {
            return Err(Error::DimensionMismatch(
                "surrogate gradient length differs from loss gradient".into(),
            ));
        }
        if !(self.loss_normalizer.is_finite() && self.loss_normalizer > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss normalizer must be positive, got {}",
                self.loss_normalizer
            )));
        }
        Ok(())
    }
}

/// One step of the damped multiplier method on problem
/// `min phi(w) s.t. g(w) = 0`:
///
/// ```text
/// lambda <- lambda + gamma * g(w)
/// w      <- w - eta * (grad_phi + lambda^T grad_g + c * g(w)^T grad_g)
/// ```
#[allow(clippy::too_many_arguments)]
pub fn generic_mmdm_step(
    w: &[f64],
    lambda: &[f64],
    phi_grad: &[f64],
    g_vals: &[f64],
    g_grads: &[Vec<f64>],
    eta: f64,
    gamma: f64,
    c: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi_grad.len() != w.len()
        || g_vals.len() != lambda.len()
        || g_grads.len() != g_vals.len()
        || g_grads.iter().any(|g| g.len() != w.len())
    {
        return Err(Error::DimensionMismatch("mmdm step inputs".into()));
    }
    if !all_finite(w)
        || !all_finite(lambda)
        || !all_finite(phi_grad)
        || !all_finite(g_vals)
        || g_grads.iter().any(|g| !all_finite(g))
    {
        return Err(Error::NonFinite("mmdm step inputs".into()));
    }

    let lambda_next: Vec<f64> = lambda
        .iter()
        .zip(g_vals)
        .map(|(l, g)| l + gamma * g)
        .collect();

    let mut step = phi_grad.to_vec();
    for ((grad, &l), &g) in g_grads.iter().zip(&lambda_next).zip(g_vals) {
        axpy(&mut step, l + c * g, grad);
    }
    let w_next: Vec<f64> = w.iter().zip(&step).map(|(wi, s)| wi - eta * s).collect();
    Ok((w_next, lambda_next))
}

fn sign(diff: f64) -> f64 {
    // Subgradient choice at the kink: sign(0) = 0, no push either way.
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Constraint values g_a and gradients of g_a with respect to the
/// parameters, from aggregated per-group surrogate statistics.
///
/// With pooled ratio R = sum(F)/sum(n') and diff_a = R - F_a/n'_a:
/// when |diff_a| - alpha >= 0 the gradient is
/// `sign(diff_a) * (grad_F/n' - grad_F_a/n'_a)`, otherwise the zero vector.
pub fn fairness_constraint_grads(inputs: &UpdateInputs) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    inputs.validate()?;
    let p = inputs.grad_loss.len();
    let groups = inputs.f_sums.len();
    let total: f64 = inputs.counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllGroupsEmpty);
    }
    let pooled = inputs.f_sums.iter().sum::<f64>() / total;

    let mut grad_pooled = vec![0.0; p];
    for g in &inputs.grad_f {
        axpy(&mut grad_pooled, 1.0 / total, g);
    }

    let mut g_vals = vec![0.0; groups];
    let mut g_grads = vec![vec![0.0; p]; groups];
    for a in 0..groups {
        let n_a = inputs.counts[a];
        if n_a <= 0.0 {
            continue; // no samples to measure: constraint stays inactive
        }
        let diff = pooled - inputs.f_sums[a] / n_a;
        let h = diff.abs() - inputs.alpha;
        if h < 0.0 {
            continue;
        }
        g_vals[a] = h;
        let s = sign(diff);
        if s != 0.0 {
            let grad = &mut g_grads[a];
            grad.copy_from_slice(&grad_pooled);
            axpy(grad, -1.0 / n_a, &inputs.grad_f[a]);
            if s < 0.0 {
                for v in grad.iter_mut() {
                    *v = -*v;
                }
            }
        }
    }
    Ok((g_vals, g_grads))
}

/// Fairness-constrained parameter update (damped when `mult.c > 0`,
/// plain multiplier method when `mult.c == 0`):
///
/// ```text
/// lambda <- lambda + gamma * g
/// w      <- w - eta * (grad_L / n + lambda^T grad_g + c * g^T grad_g)
/// ```
pub fn fpfl_update(
    w: &[f64],
    mult: &MultiplierState,
    inputs: &UpdateInputs,
    eta: f64,
) -> Result<(Vec<f64>, MultiplierState)> {
    let (g_vals, g_grads) = fairness_constraint_grads(inputs)?;
    if mult.lambda.len() != g_vals.len() {
        return Err(Error::DimensionMismatch("multiplier count".into()));
    }
    let mut phi_grad = inputs.grad_loss.clone();
    let inv_n = 1.0 / inputs.loss_normalizer;
    for v in phi_grad.iter_mut() {
        *v *= inv_n;
    }
    let (w_next, lambda_next) = generic_mmdm_step(
        w,
        &mult.lambda,
        &phi_grad,
        &g_vals,
        &g_grads,
        eta,
        mult.gamma,
        mult.c,
    )?;
    if !all_finite(&w_next) {
        return Err(Error::NonFinite("updated parameters".into()));
    }
    let mut next = mult.clone();
    next.lambda = lambda_next;
    Ok((w_next, next))
}

/// Sign-free variant: the constraint gradient takes the elementwise
/// absolute difference of the normalized gradients, damping is off, and
/// the multiplier is clamped to [0, lambda_max].
pub fn tran_variant_update(
    w: &[f64],
    mult: &MultiplierState,
    inputs: &UpdateInputs,
    eta: f64,
) -> Result<(Vec<f64>, MultiplierState)> {
    let lambda_max = mult.lambda_max.ok_or_else(|| {
        Error::InvalidConfig("sign-free variant requires lambda_max".into())
    })?;
    inputs.validate()?;
    let p = inputs.grad_loss.len();
    let groups = inputs.f_sums.len();
    if mult.lambda.len() != groups {
        return Err(Error::DimensionMismatch("multiplier count".into()));
    }
    let total: f64 = inputs.counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllGroupsEmpty);
    }
    let pooled = inputs.f_sums.iter().sum::<f64>() / total;
    let mut grad_pooled = vec![0.0; p];
    for g in &inputs.grad_f {
        axpy(&mut grad_pooled, 1.0 / total, g);
    }

    let mut g_vals = vec![0.0; groups];
    let mut g_grads = vec![vec![0.0; p]; groups];
    for a in 0..groups {
        let n_a = inputs.counts[a];
        if n_a <= 0.0 {
            continue;
        }
        let h = (pooled - inputs.f_sums[a] / n_a).abs() - inputs.alpha;
        if h < 0.0 {
            continue;
        }
        g_vals[a] = h;
        let grad = &mut g_grads[a];
        for i in 0..p {
            grad[i] = (grad_pooled[i] - inputs.grad_f[a][i] / n_a).abs();
        }
    }

    let lambda_next: Vec<f64> = mult
        .lambda
        .iter()
        .zip(&g_vals)
        .map(|(l, g)| (l + mult.gamma * g).clamp(0.0, lambda_max))
        .collect();

    let mut step = inputs.grad_loss.clone();
    let inv_n = 1.0 / inputs.loss_normalizer;
    for v in step.iter_mut() {
        *v *= inv_n;
    }
    for (grad, &l) in g_grads.iter().zip(&lambda_next) {
        axpy(&mut step, l, grad);
    }
    let w_next: Vec<f64> = w.iter().zip(&step).map(|(wi, s)| wi - eta * s).collect();
    if !all_finite(&w_next) {
        return Err(Error::NonFinite("updated parameters".into()));
    }
    let mut next = mult.clone();
    next.lambda = lambda_next;
    Ok((w_next, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_constraint_is_plain_gradient_step() {
        let w = vec![1.0, -2.0];
        let lambda = vec![0.0];
        let phi = vec![0.5, 0.25];
        let (w2, l2) =
            generic_mmdm_step(&w, &lambda, &phi, &[0.0], &[vec![3.0, 3.0]], 0.1, 0.05, 2.0)
                .unwrap();
        assert_eq!(l2, vec![0.0]);
        assert!((w2[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((w2[1] - (-2.0 - 0.1 * 0.25)).abs() < 1e-15);
    }

    /// phi(w) = w^2, g(w) = w - 1: stationary point at (w, lambda) = (1, -2).
    fn toy_step(w: f64, lambda: f64, eta: f64, gamma: f64, c: f64) -> (f64, f64) {
        let (w2, l2) = generic_mmdm_step(
            &[w],
            &[lambda],
            &[2.0 * w],
            &[w - 1.0],
            &[vec![1.0]],
            eta,
            gamma,
            c,
        )
        .unwrap();
        (w2[0], l2[0])
    }

    #[test]
    fn toy_problem_fixed_point_residual_is_zero() {
        let (w2, l2) = toy_step(1.0, -2.0, 0.05, 0.05, 2.0);
        assert_eq!(w2, 1.0);
        assert_eq!(l2, -2.0);
    }

    #[test]
    fn toy_problem_converges_to_constrained_optimum() {
        let (mut w, mut lambda) = (0.9, 0.0);
        for _ in 0..2000 {
            let (w2, l2) = toy_step(w, lambda, 0.05, 0.05, 2.0);
            w = w2;
            lambda = l2;
        }
        assert!((w - 1.0).abs() < 1e-3, "w = {w}");
        assert!((lambda + 2.0).abs() < 1e-3, "lambda = {lambda}");
    }

    fn demo_inputs() -> UpdateInputs {
        // two groups; group 0 ratio 0.5, group 1 ratio 0.2; pooled 0.35
        UpdateInputs {
            grad_loss: vec![1.0, 2.0],
            loss_normalizer: 20.0,
            f_sums: vec![5.0, 2.0],
            grad_f: vec![vec![0.4, -0.2], vec![-0.6, 0.8]],
            counts: vec![10.0, 10.0],
            alpha: 0.02,
        }
    }

    #[test]
    fn constraint_signs_follow_ratio_ordering() {
        let inputs = demo_inputs();
        let (g, grads) = fairness_constraint_grads(&inputs).unwrap();
        // pooled = 0.35; diff_0 = 0.35 - 0.5 = -0.15 -> sign -1
        // diff_1 = 0.35 - 0.2 = +0.15 -> sign +1
        assert!((g[0] - 0.13).abs() < 1e-12);
        assert!((g[1] - 0.13).abs() < 1e-12);
        let pooled_grad = [(0.4 - 0.6) / 20.0, (-0.2 + 0.8) / 20.0];
        let expect0: Vec<f64> = (0..2)
            .map(|i| -(pooled_grad[i] - inputs.grad_f[0][i] / 10.0))
            .collect();
        let expect1: Vec<f64> = (0..2)
            .map(|i| pooled_grad[i] - inputs.grad_f[1][i] / 10.0)
            .collect();
        for i in 0..2 {
            assert!((grads[0][i] - expect0[i]).abs() < 1e-12);
            assert!((grads[1][i] - expect1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_constraints_reduce_to_plain_step() {
        let mut inputs = demo_inputs();
        inputs.alpha = 1.0; // ratios live in [0,1]: nothing can activate
        let mult = MultiplierState::new(2, 0.01, 2.0);
        let w = vec![0.3, -0.4];
        let (w2, m2) = fpfl_update(&w, &mult, &inputs, 0.1).unwrap();
        assert_eq!(m2.lambda, vec![0.0, 0.0]);
        for i in 0..2 {
            let plain = w[i] - 0.1 * inputs.grad_loss[i] / inputs.loss_normalizer;
            assert_eq!(w2[i], plain);
        }
    }

    #[test]
    fn lambda_is_nondecreasing_under_updates() {
        let mut inputs = demo_inputs();
        let mut mult = MultiplierState::new(2, 0.05, 2.0);
        let mut w = vec![0.1, 0.2];
        let mut prev = mult.lambda.clone();
        for step in 0..50 {
            // wiggle the statistics a little, keeping counts positive
            inputs.f_sums[0] = 5.0 + (step as f64 * 0.7).sin();
            let (w2, m2) = fpfl_update(&w, &mult, &inputs, 0.01).unwrap();
            w = w2;
            mult = m2;
            for (l, p) in mult.lambda.iter().zip(&prev) {
                assert!(l >= p, "lambda decreased: {l} < {p}");
            }
            prev = mult.lambda.clone();
        }
    }

    #[test]
    fn group_permutation_permutes_lambda_and_preserves_w() {
        let inputs = demo_inputs();
        let mult = MultiplierState {
            lambda: vec![0.03, 0.01],
            gamma: 0.05,
            c: 2.0,
            lambda_max: None,
        };
        let w = vec![0.5, 0.6];
        let (w_a, m_a) = fpfl_update(&w, &mult, &inputs, 0.1).unwrap();

        let permuted = UpdateInputs {
            grad_loss: inputs.grad_loss.clone(),
            loss_normalizer: inputs.loss_normalizer,
            f_sums: vec![inputs.f_sums[1], inputs.f_sums[0]],
            grad_f: vec![inputs.grad_f[1].clone(), inputs.grad_f[0].clone()],
            counts: vec![inputs.counts[1], inputs.counts[0]],
            alpha: inputs.alpha,
        };
        let mult_p = MultiplierState {
            lambda: vec![0.01, 0.03],
            ..mult.clone()
        };
        let (w_b, m_b) = fpfl_update(&w, &mult_p, &permuted, 0.1).unwrap();
        for (a, b) in w_a.iter().zip(&w_b) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((m_a.lambda[0] - m_b.lambda[1]).abs() < 1e-15);
        assert!((m_a.lambda[1] - m_b.lambda[0]).abs() < 1e-15);
    }

    #[test]
    fn sign_free_variant_clamps_lambda_and_drops_damping() {
        let inputs = UpdateInputs {
            alpha: 0.0,
            ..demo_inputs()
        };
        let mult = MultiplierState::new(2, 10.0, 5.0).with_lambda_max(0.05);
        let w = vec![0.0, 0.0];
        let (_, m2) = tran_variant_update(&w, &mult, &inputs, 0.1).unwrap();
        // gamma = 10 would push lambda far beyond the cap
        assert_eq!(m2.lambda, vec![0.05, 0.05]);
        // at the cap it stays there
        let (_, m3) = tran_variant_update(&w, &m2, &inputs, 0.1).unwrap();
        assert_eq!(m3.lambda, vec![0.05, 0.05]);
    }

    #[test]
    fn sign_free_variant_identical_group_gradients_mean_plain_step() {
        let inputs = UpdateInputs {
            grad_loss: vec![1.0, 2.0],
            loss_normalizer: 10.0,
            f_sums: vec![2.0, 2.0],
            grad_f: vec![vec![0.5, -0.5], vec![0.5, -0.5]],
            counts: vec![5.0, 5.0],
            alpha: 0.0,
        };
        let mult = MultiplierState::new(2, 0.1, 0.0).with_lambda_max(0.05);
        let w = vec![0.3, 0.3];
        let (w2, _) = tran_variant_update(&w, &mult, &inputs, 0.1).unwrap();
        for i in 0..2 {
            let plain = w[i] - 0.1 * inputs.grad_loss[i] / 10.0;
            assert!((w2[i] - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_lambda_max_is_rejected() {
        let inputs = demo_inputs();
        let mult = MultiplierState::new(2, 0.1, 0.0);
        assert!(tran_variant_update(&[0.0, 0.0], &mult, &inputs, 0.1).is_err());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let w = vec![f64::NAN];
        assert!(generic_mmdm_step(&w, &[0.0], &[0.0], &[0.0], &[vec![0.0]], 0.1, 0.1, 0.0)
            .is_err());
    }
}
