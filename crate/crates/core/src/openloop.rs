//! Deterministic finite-horizon trajectory optimization (iLQR) and the discrete
//! Minimum-Principle residual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::ControlAffineModel;
use crate::rollout::{forward_pass, Trajectory};

const MAX_REGULARIZATION: f64 = 1e10;
const MIN_REGULARIZATION: f64 = 1e-12;
const ROUNDOFF_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Relative cost decrease below which the iteration may stop.
    pub cost_tolerance: f64,
    /// Minimum-Principle residual below which the iteration may stop.
    pub gradient_tolerance: f64,
    /// Initial Levenberg term added to the control Hessian.
    pub regularization: f64,
    pub regularization_growth: f64,
    pub regularization_shrink: f64,
    /// Backtracking tries step sizes `1, 1/2, ..., 2^-line_search_steps`.
    pub line_search_steps: u32,
    /// Include co-state-weighted dynamics Hessians in the backward pass (DDP)
    /// instead of the Gauss-Newton approximation.
    pub second_order: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-9,
            gradient_tolerance: 1e-6,
            regularization: 1e-6,
            regularization_growth: 10.0,
            regularization_shrink: 0.5,
            line_search_steps: 10,
            second_order: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("cost_tolerance", self.cost_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("regularization", self.regularization),
            ("regularization_shrink", self.regularization_shrink),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be positive".into());
        }
        if !(self.regularization_growth > 1.0 && self.regularization_shrink < 1.0) {
            return Err("need regularization_growth > 1 > regularization_shrink".into());
        }
        Ok(())
    }

    /// Tighter tolerances, for oracle comparisons that difference solver outputs.
    pub fn precise() -> Self {
        Self {
            max_iterations: 500,
            cost_tolerance: 1e-14,
            gradient_tolerance: 1e-10,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub trajectory: Trajectory,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub cost_history: Vec<f64>,
}

impl NominalTrajectory {
    pub fn cost(&self) -> f64 {
        self.trajectory.total_cost
    }
}

/// Backward co-state recursion `G_t = l_x(x_t) dt + A_t' G_{t+1}`, `G_T = grad c_T(x_T)`.
///
/// Returns `G_0 .. G_T`.
pub fn costates(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
) -> Result<Vec<DVector<f64>>> {
    let horizon = traj.horizon();
    let dt = model.dt();
    let mut g = vec![DVector::zeros(model.state_dim()); horizon + 1];
    g[horizon] = cost.terminal_gradient(&traj.states[horizon]);
    for t in (0..horizon).rev() {
        let (a, _) = model.linearize(&traj.states[t], &traj.controls[t])?;
        g[t] = cost.state_gradient(&traj.states[t]) * dt + a.transpose() * &g[t + 1];
    }
    Ok(g)
}

fn stationarity_residual(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
    g: &[DVector<f64>],
) -> Result<f64> {
    let dt = model.dt();
    let r_chol = cost
        .control_weight()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Contract("R is not positive definite".into()))?;
    let mut worst: f64 = 0.0;
    let mut u_scale: f64 = 1.0;
    for (t, u) in traj.controls.iter().enumerate() {
        let b = model.input_matrix(&traj.states[t]) * dt;
        let implied = -r_chol.solve(&(b.transpose() * &g[t + 1])) / dt;
        worst = worst.max((u - implied).amax());
        u_scale = u_scale.max(u.amax());
    }
    let r = worst / u_scale;
    if !r.is_finite() {
        return Err(Error::Numeric("Minimum-Principle residual is not finite".into()));
    }
    Ok(r)
}

/// Largest violation of the discrete stationarity condition
/// `u_t = -R^{-1} B_t' G_{t+1} / dt`, normalized by `max(1, max|u|)`.
pub fn minimum_principle_residual(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
) -> Result<f64> {
    if traj.states.len() != traj.controls.len() + 1 {
        return Err(Error::Contract("trajectory has mismatched lengths".into()));
    }
    for t in 0..traj.horizon() {
        let next = model.step_nominal(&traj.states[t], &traj.controls[t])?;
        let gap = (&next - &traj.states[t + 1]).amax() / next.amax().max(1.0);
        if gap > 1e-9 {
            return Err(Error::Contract(format!(
                "trajectory is not dynamically feasible at step {t} (gap {gap:e})"
            )));
        }
    }
    let g = costates(model, cost, traj)?;
    stationarity_residual(model, cost, traj, &g)
}

struct Gains {
    feedforward: Vec<DVector<f64>>,
    feedback: Vec<DMatrix<f64>>,
}

/// Gauss-Newton (or full second-order) backward pass with a Levenberg term on
/// the control Hessian.
fn backward_pass(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
    mu: f64,
    second_order: bool,
) -> Result<Gains> {
    let horizon = traj.horizon();
    let dt = model.dt();
    let p = model.control_dim();
    let r = cost.control_weight();
    let x_final = &traj.states[horizon];
    let mut vx = cost.terminal_gradient(x_final);
    let mut vxx = cost.terminal_hessian(x_final);
    let mut feedforward = vec![DVector::zeros(p); horizon];
    let mut feedback = vec![DMatrix::zeros(p, model.state_dim()); horizon];
    for t in (0..horizon).rev() {
        let (x, u) = (&traj.states[t], &traj.controls[t]);
        let (a, b) = model.linearize(x, u)?;
        let at = a.transpose();
        let bt = b.transpose();
        let qx = cost.state_gradient(x) * dt + &at * &vx;
        let qu = r * u * dt + &bt * &vx;
        let mut qxx = cost.state_hessian(x) * dt + &at * &vxx * &a;
        let quu = r * dt + &bt * &vxx * &b;
        let mut qux = &bt * &vxx * &a;
        if second_order {
            let so = model.second_order(x, u)?;
            qxx += so.weighted_hessian(&vx, u) * dt;
            qux += so.weighted_input_jacobian(&vx) * dt;
        }
        let quu_reg = &quu + DMatrix::identity(p, p) * mu;
        let chol = quu_reg
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { step: t })?;
        let k = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        let kkt = kk.transpose();
        vx = qx + &kkt * &quu * &k + &kkt * &qu + qux.transpose() * &k;
        let v = qxx + &kkt * &quu * &kk + &kkt * &qux + qux.transpose() * &kk;
        vxx = (&v + v.transpose()) * 0.5;
        feedforward[t] = k;
        feedback[t] = kk;
    }
    Ok(Gains {
        feedforward,
        feedback,
    })
}

fn apply_step(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
    gains: &Gains,
    alpha: f64,
) -> Result<Trajectory> {
    let horizon = traj.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(traj.states[0].clone());
    for t in 0..horizon {
        let dx = &states[t] - &traj.states[t];
        let u = &traj.controls[t] + &gains.feedforward[t] * alpha + &gains.feedback[t] * dx;
        let next = model.step_nominal(&states[t], &u)?;
        controls.push(u);
        states.push(next);
    }
    Trajectory::from_path(model, cost, states, controls)
}

/// Solves the noise-free problem `min sum_t c(x_t, u_t) + c_T(x_H)` from `x0`.
///
/// Converges when the relative cost decrease falls below `cost_tolerance` and the
/// Minimum-Principle residual falls below `gradient_tolerance`; a warm start that
/// already meets the residual test is returned without iterating. Running out of
/// iterations (or regularization headroom) returns the best iterate with
/// `converged = false`.
pub fn solve_open_loop(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    horizon: usize,
    settings: &SolverSettings,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<NominalTrajectory> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be >= 1".into()));
    }
    settings.validate().map_err(Error::Contract)?;
    if x0.len() != model.state_dim() {
        return Err(Error::Contract("x0 has the wrong dimension".into()));
    }
    let controls = match warm_start {
        Some(ws) if ws.len() != horizon => {
            return Err(Error::Contract(format!(
                "warm start has {} controls for horizon {horizon}",
                ws.len()
            )))
        }
        Some(ws) => ws.to_vec(),
        None => vec![DVector::zeros(model.control_dim()); horizon],
    };
    let mut traj = forward_pass(model, cost, x0, &controls)?;
    let mut history = vec![traj.total_cost];
    let mut mu = settings.regularization;
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    // A warm start that already satisfies the Minimum Principle is returned as is.
    if warm_start.is_some() {
        residual = minimum_principle_residual_unchecked(model, cost, &traj)?;
        if residual < settings.gradient_tolerance {
            converged = true;
        }
    }

    'outer: while !converged && iterations < settings.max_iterations {
        iterations += 1;
        let gains = loop {
            match backward_pass(model, cost, &traj, mu, settings.second_order) {
                Ok(g) => break g,
                Err(Error::NotPositiveDefinite { .. }) => {
                    mu *= settings.regularization_growth;
                    if mu > MAX_REGULARIZATION {
                        break 'outer;
                    }
                }
                Err(e) => return Err(e),
            }
        };

        let mut accepted = None;
        for i in 0..=settings.line_search_steps {
            let alpha = 0.5f64.powi(i as i32);
            if let Ok(candidate) = apply_step(model, cost, &traj, &gains, alpha) {
                if candidate.total_cost < traj.total_cost {
                    accepted = Some(candidate);
                    break;
                }
                // Near the optimum cost changes drown in roundoff; keep stepping
                // while the stationarity residual still improves.
                let tie = (candidate.total_cost - traj.total_cost).abs()
                    <= ROUNDOFF_TIE * traj.total_cost.abs().max(1.0);
                if tie {
                    if !residual.is_finite() {
                        residual = minimum_principle_residual_unchecked(model, cost, &traj)?;
                    }
                    let r = minimum_principle_residual_unchecked(model, cost, &candidate)?;
                    if r < 0.5 * residual {
                        accepted = Some(candidate);
                        break;
                    }
                }
            }
        }

        match accepted {
            Some(candidate) => {
                let old = traj.total_cost;
                traj = candidate;
                history.push(traj.total_cost);
                mu = (mu * settings.regularization_shrink).max(MIN_REGULARIZATION);
                let rel_decrease = ((old - traj.total_cost) / old.abs().max(1e-300)).max(0.0);
                residual = minimum_principle_residual_unchecked(model, cost, &traj)?;
                if rel_decrease < settings.cost_tolerance && residual < settings.gradient_tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                residual = minimum_principle_residual_unchecked(model, cost, &traj)?;
                if residual < settings.gradient_tolerance {
                    converged = true;
                    break;
                }
                mu *= settings.regularization_growth;
                if mu > MAX_REGULARIZATION {
                    break;
                }
            }
        }
    }
    if !residual.is_finite() {
        residual = minimum_principle_residual_unchecked(model, cost, &traj)?;
    }
    Ok(NominalTrajectory {
        trajectory: traj,
        converged,
        iterations,
        final_gradient_norm: residual,
        cost_history: history,
    })
}

/// Residual for trajectories produced by our own forward passes.
fn minimum_principle_residual_unchecked(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    traj: &Trajectory,
) -> Result<f64> {
    let g = costates(model, cost, traj)?;
    stationarity_residual(model, cost, traj, &g)
}
