//! Perturbation feedback about an optimal nominal trajectory.
//!
//! Along a nominal `(x_t, u_t)` that satisfies the discrete Minimum Principle, the
//! optimal cost-to-go expands as `J_t + G_t' dx + 1/2 dx' P_t dx`. The gradient
//! `G_t` is the co-state and the Hessian `P_t` obeys a Riccati-like recursion that
//! carries second-derivative terms of the dynamics weighted by the co-state:
//!
//! ```text
//! G_t = l_x dt + A_t' G_{t+1}
//! S_t = R dt + B_t' P_{t+1} B_t
//! K_t = -S_t^{-1} [ sum_k G^k_{t+1} dG_k/dx dt + B_t' P_{t+1} A_t ]
//! P_t = A_t' P_{t+1} A_t + l_xx dt + sum_k G^k_{t+1} (f_k'' + sum_j u_j G_kj'') dt - K_t' S_t K_t
//! ```
//!
//! Dropping every co-state-weighted term gives the ordinary time-varying LQR
//! recursion about the same nominal; [`lqr_gain_pass`] computes that for comparison.

use nalgebra::{DMatrix, DVector};

use crate::cost::CostModel;
use crate::error::{ensure_finite_mat, Error, Result};
use crate::model::ControlAffineModel;
use crate::openloop::{costates, NominalTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GainOptions {
    /// Regularize a non-positive-definite `R dt + B'PB` instead of failing.
    pub levenberg_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub nominal: NominalTrajectory,
    /// `K_0 .. K_{T-1}`.
    pub gains: Vec<DMatrix<f64>>,
    /// `G_0 .. G_T`.
    pub costates: Vec<DVector<f64>>,
    /// `P_0 .. P_T`.
    pub hessians: Vec<DMatrix<f64>>,
}

impl FeedbackPolicy {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// `u_t = ubar_t + K_t (x - xbar_t)`.
    pub fn apply(&self, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        apply_policy(self, x, t)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Recursion {
    Perturbation,
    Lqr,
}

/// T-PFC gains, co-states and Hessians about a converged nominal.
pub fn backward_gain_pass(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    nominal: &NominalTrajectory,
) -> Result<FeedbackPolicy> {
    backward_gain_pass_with(model, cost, nominal, GainOptions::default())
}

pub fn backward_gain_pass_with(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    nominal: &NominalTrajectory,
    options: GainOptions,
) -> Result<FeedbackPolicy> {
    if !nominal.converged {
        return Err(Error::Contract(
            "gain pass requires a converged nominal trajectory".into(),
        ));
    }
    gain_recursion(model, cost, nominal, options, Recursion::Perturbation)
}

/// Time-varying LQR gains about the same nominal (no second-order dynamics terms).
pub fn lqr_gain_pass(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    nominal: &NominalTrajectory,
) -> Result<FeedbackPolicy> {
    gain_recursion(model, cost, nominal, GainOptions::default(), Recursion::Lqr)
}

fn gain_recursion(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    nominal: &NominalTrajectory,
    options: GainOptions,
    kind: Recursion,
) -> Result<FeedbackPolicy> {
    let traj = &nominal.trajectory;
    let horizon = traj.horizon();
    let n = model.state_dim();
    let p = model.control_dim();
    let dt = model.dt();
    let r = cost.control_weight();

    let costates = costates(model, cost, traj)?;
    let mut hessians = vec![DMatrix::zeros(n, n); horizon + 1];
    let mut gains = vec![DMatrix::zeros(p, n); horizon];
    let terminal = cost.terminal_hessian(&traj.states[horizon]);
    hessians[horizon] = (&terminal + terminal.transpose()) * 0.5;

    for t in (0..horizon).rev() {
        let (x, u) = (&traj.states[t], &traj.controls[t]);
        let (a, b) = model.linearize(x, u)?;
        let p_next = &hessians[t + 1];
        let g_next = &costates[t + 1];
        let bt = b.transpose();

        let mut qxx = a.transpose() * p_next * &a + cost.state_hessian(x) * dt;
        let mut qux = &bt * p_next * &a;
        if kind == Recursion::Perturbation {
            let so = model.second_order(x, u)?;
            qxx += so.weighted_hessian(g_next, u) * dt;
            qux += so.weighted_input_jacobian(g_next) * dt;
        }
        let mut quu = r * dt + &bt * p_next * &b;
        quu = (&quu + quu.transpose()) * 0.5;

        let chol = match quu.clone().cholesky() {
            Some(c) => c,
            None if options.levenberg_fallback => {
                let shift = (-quu.clone().symmetric_eigenvalues().min()).max(0.0) + 1e-8 * r.norm() * dt;
                (&quu + DMatrix::identity(p, p) * shift)
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite { step: t })?
            }
            None => return Err(Error::NotPositiveDefinite { step: t }),
        };
        let k = -chol.solve(&qux);
        let p_t = qxx - k.transpose() * &quu * &k;
        let p_t = (&p_t + p_t.transpose()) * 0.5;
        ensure_finite_mat(&k, "feedback gain")?;
        ensure_finite_mat(&p_t, "cost-to-go Hessian")?;
        gains[t] = k;
        hessians[t] = p_t;
    }

    Ok(FeedbackPolicy {
        nominal: nominal.clone(),
        gains,
        costates,
        hessians,
    })
}

/// `u = ubar_t + K_t (x - xbar_t)`.
pub fn apply_policy(policy: &FeedbackPolicy, x: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    if t >= policy.horizon() {
        return Err(Error::Contract(format!(
            "step {t} outside policy horizon {}",
            policy.horizon()
        )));
    }
    let traj = &policy.nominal.trajectory;
    if x.len() != traj.states[t].len() {
        return Err(Error::Contract("state has the wrong dimension".into()));
    }
    Ok(&traj.controls[t] + &policy.gains[t] * (x - &traj.states[t]))
}

/// Cost-triggered replanning test.
///
/// True when the realized cost deviates from the nominal cost to date by more than
/// `threshold` relative. A non-positive nominal falls back to an absolute test.
pub fn should_replan(accumulated_cost: f64, nominal_cost_to_date: f64, threshold: f64) -> bool {
    let deviation = (accumulated_cost - nominal_cost_to_date).abs();
    if nominal_cost_to_date > 0.0 {
        deviation / nominal_cost_to_date > threshold
    } else {
        deviation > threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replan_rule() {
        assert!(!should_replan(3.0, 3.0, 0.2));
        assert!(should_replan(1.25, 1.0, 0.2));
        assert!(!should_replan(1.15, 1.0, 0.2));
        assert!(should_replan(0.7, 1.0, 0.2));
        assert!(!should_replan(0.1, 0.0, 0.2));
        assert!(should_replan(0.3, 0.0, 0.2));
        assert!(!should_replan(1e9, 1.0, f64::INFINITY));
    }
}
