//! Closed-loop controllers: shrinking-horizon MPC, fixed-horizon MPC, and
//! perturbation feedback with optional cost-triggered replanning.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::ControlAffineModel;
use crate::noise::NoiseConfig;
use crate::openloop::{solve_open_loop, NominalTrajectory, SolverSettings};
use crate::rollout::{rollout, Controller, Trajectory};
use crate::tpfc::{apply_policy, backward_gain_pass, should_replan, FeedbackPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ShrinkingMpc,
    FixedMpc,
    Tpfc,
    Tpfc2,
    GridDpPolicy,
    OpenLoop,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::ShrinkingMpc => "shrinking_mpc",
            ControllerKind::FixedMpc => "fixed_mpc",
            ControllerKind::Tpfc => "tpfc",
            ControllerKind::Tpfc2 => "tpfc2",
            ControllerKind::GridDpPolicy => "grid_dp_policy",
            ControllerKind::OpenLoop => "open_loop",
        }
    }
}

pub const DEFAULT_REPLAN_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    /// Display label; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Planning horizon for `fixed_mpc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_horizon: Option<usize>,
    /// Relative cost deviation that triggers a replan (`tpfc2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replan_threshold: Option<f64>,
    /// Noise level the grid DP policy is solved for; `None` means "the evaluated epsilon".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_epsilon: Option<f64>,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            kind,
            label: None,
            fixed_horizon: None,
            replan_threshold: if kind == ControllerKind::Tpfc2 {
                Some(DEFAULT_REPLAN_THRESHOLD)
            } else {
                None
            },
            dp_epsilon: None,
            solver: SolverSettings::default(),
        }
    }

    pub fn fixed(horizon: usize) -> Self {
        Self {
            fixed_horizon: Some(horizon),
            ..Self::new(ControllerKind::FixedMpc)
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn label(&self) -> String {
        match (&self.label, self.kind) {
            (Some(l), _) => l.clone(),
            (None, ControllerKind::FixedMpc) => {
                format!("fixed_mpc_h{}", self.fixed_horizon.unwrap_or(0))
            }
            (None, k) => k.as_str().to_string(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.replan_threshold.unwrap_or(DEFAULT_REPLAN_THRESHOLD)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.solver.validate()?;
        match self.kind {
            ControllerKind::FixedMpc => match self.fixed_horizon {
                Some(h) if h >= 1 => {}
                _ => return Err("fixed_mpc requires fixed_horizon >= 1".into()),
            },
            ControllerKind::Tpfc2 => {
                if !(self.threshold() > 0.0) {
                    return Err("tpfc2 requires replan_threshold > 0".into());
                }
            }
            _ => {}
        }
        if let Some(e) = self.dp_epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return Err("dp_epsilon must be >= 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub step: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub converged: bool,
    pub planned_cost: f64,
}

/// Realized closed-loop trajectory and controller bookkeeping.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub solves: Vec<SolveRecord>,
    pub replans: usize,
    pub degraded: bool,
}

/// Receding-horizon controller that re-solves the deterministic problem each step.
///
/// With `window = None` the horizon shrinks to the remaining steps; with
/// `Some(h)` each subproblem spans `min(h, remaining)` steps and the terminal
/// cost is applied at its end.
pub struct RecedingHorizon<'a> {
    model: &'a ControlAffineModel,
    cost: &'a dyn CostModel,
    total_horizon: usize,
    window: Option<usize>,
    settings: SolverSettings,
    plan: Vec<DVector<f64>>,
    pub solves: Vec<SolveRecord>,
    degraded: bool,
}

impl<'a> RecedingHorizon<'a> {
    pub fn shrinking(
        model: &'a ControlAffineModel,
        cost: &'a dyn CostModel,
        total_horizon: usize,
        settings: SolverSettings,
    ) -> Self {
        Self {
            model,
            cost,
            total_horizon,
            window: None,
            settings,
            plan: Vec::new(),
            solves: Vec::new(),
            degraded: false,
        }
    }

    pub fn fixed(
        model: &'a ControlAffineModel,
        cost: &'a dyn CostModel,
        total_horizon: usize,
        window: usize,
        settings: SolverSettings,
    ) -> Self {
        Self {
            window: Some(window),
            ..Self::shrinking(model, cost, total_horizon, settings)
        }
    }

    /// Previous plan shifted by one step, padded with its last control.
    fn warm_start(&self, horizon: usize) -> Option<Vec<DVector<f64>>> {
        if self.plan.len() < 2 {
            return None;
        }
        let mut ws: Vec<DVector<f64>> = self.plan[1..].to_vec();
        let last = ws.last().cloned().expect("non-empty");
        ws.resize(horizon, last);
        ws.truncate(horizon);
        Some(ws)
    }
}

impl Controller for RecedingHorizon<'_> {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if t >= self.total_horizon {
            return Err(Error::Contract(format!("step {t} beyond horizon {}", self.total_horizon)));
        }
        let remaining = self.total_horizon - t;
        let horizon = self.window.map_or(remaining, |w| w.min(remaining));
        let warm = self.warm_start(horizon);
        let sol = solve_open_loop(self.model, self.cost, x, horizon, &self.settings, warm.as_deref())?;
        self.degraded |= !sol.converged;
        self.solves.push(SolveRecord {
            step: t,
            horizon,
            iterations: sol.iterations,
            converged: sol.converged,
            planned_cost: sol.cost(),
        });
        self.plan = sol.trajectory.controls;
        Ok(self.plan[0].clone())
    }

    fn degraded(&self) -> bool {
        self.degraded
    }
}

/// Linear perturbation feedback about a nominal, optionally replanning when the
/// realized running cost drifts from the nominal one.
///
/// The replan test compares the cost accumulated since the current nominal was
/// planned with that nominal's own running cost over the same steps.
pub struct PerturbationFeedback<'a> {
    model: &'a ControlAffineModel,
    cost: &'a dyn CostModel,
    total_horizon: usize,
    settings: SolverSettings,
    threshold: Option<f64>,
    policy: Option<FeedbackPolicy>,
    /// Nominal controls used when gains are unavailable.
    fallback: Vec<DVector<f64>>,
    plan_start: usize,
    accumulated: f64,
    replans: usize,
    degraded: bool,
}

impl<'a> PerturbationFeedback<'a> {
    pub fn new(
        model: &'a ControlAffineModel,
        cost: &'a dyn CostModel,
        nominal: &NominalTrajectory,
        settings: SolverSettings,
        threshold: Option<f64>,
    ) -> Self {
        let mut me = Self {
            model,
            cost,
            total_horizon: nominal.trajectory.horizon(),
            settings,
            threshold,
            policy: None,
            fallback: Vec::new(),
            plan_start: 0,
            accumulated: 0.0,
            replans: 0,
            degraded: false,
        };
        me.install(nominal, 0);
        me
    }

    /// Starts from an existing policy (no gain computation).
    pub fn from_policy(
        model: &'a ControlAffineModel,
        cost: &'a dyn CostModel,
        policy: FeedbackPolicy,
        settings: SolverSettings,
        threshold: Option<f64>,
    ) -> Self {
        Self {
            model,
            cost,
            total_horizon: policy.horizon(),
            settings,
            threshold,
            fallback: policy.nominal.trajectory.controls.clone(),
            policy: Some(policy),
            plan_start: 0,
            accumulated: 0.0,
            replans: 0,
            degraded: false,
        }
    }

    fn install(&mut self, nominal: &NominalTrajectory, start: usize) {
        self.plan_start = start;
        self.accumulated = 0.0;
        self.fallback = nominal.trajectory.controls.clone();
        match backward_gain_pass(self.model, self.cost, nominal) {
            Ok(p) => self.policy = Some(p),
            Err(_) => {
                self.policy = None;
                self.degraded = true;
            }
        }
    }

    fn nominal_cost_to_date(&self, steps: usize) -> f64 {
        match &self.policy {
            Some(p) => p.nominal.trajectory.cost_to_date(steps),
            None => f64::NAN,
        }
    }
}

impl Controller for PerturbationFeedback<'_> {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if t >= self.total_horizon || t < self.plan_start {
            return Err(Error::Contract(format!("step {t} outside the planned horizon")));
        }
        if let (Some(threshold), Some(_)) = (self.threshold, &self.policy) {
            let steps = t - self.plan_start;
            if steps > 0 && should_replan(self.accumulated, self.nominal_cost_to_date(steps), threshold) {
                let remaining = self.total_horizon - t;
                let warm: Vec<DVector<f64>> = self.fallback[steps..].to_vec();
                let sol = solve_open_loop(self.model, self.cost, x, remaining, &self.settings, Some(&warm))?;
                self.replans += 1;
                self.install(&sol, t);
            }
        }
        let local = t - self.plan_start;
        let u = match &self.policy {
            Some(p) => apply_policy(p, x, local)?,
            None => self.fallback[local].clone(),
        };
        self.accumulated += self.cost.stage_cost(x, &u, self.model.dt());
        Ok(u)
    }

    fn degraded(&self) -> bool {
        self.degraded
    }

    fn replans(&self) -> usize {
        self.replans
    }
}

/// Shrinking-horizon MPC: at step `t` solve the deterministic problem over the
/// remaining `T - t` steps from the current state and apply the first control.
pub fn run_shrinking_mpc(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    horizon: usize,
    noise: &NoiseConfig,
    run: u64,
    settings: &SolverSettings,
) -> Result<ClosedLoopRun> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be >= 1".into()));
    }
    let mut ctrl = RecedingHorizon::shrinking(model, cost, horizon, settings.clone());
    let trajectory = rollout(model, cost, x0, &mut ctrl, noise, run, horizon)?;
    Ok(ClosedLoopRun {
        trajectory,
        degraded: ctrl.degraded,
        solves: ctrl.solves,
        replans: 0,
    })
}

/// Fixed-horizon MPC with planning window `window`.
#[allow(clippy::too_many_arguments)]
pub fn run_fixed_mpc(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    horizon: usize,
    window: usize,
    noise: &NoiseConfig,
    run: u64,
    settings: &SolverSettings,
) -> Result<ClosedLoopRun> {
    if window == 0 {
        return Err(Error::Contract("fixed MPC window must be >= 1".into()));
    }
    if horizon == 0 {
        return Err(Error::Contract("horizon must be >= 1".into()));
    }
    let mut ctrl = RecedingHorizon::fixed(model, cost, horizon, window, settings.clone());
    let trajectory = rollout(model, cost, x0, &mut ctrl, noise, run, horizon)?;
    Ok(ClosedLoopRun {
        trajectory,
        degraded: ctrl.degraded,
        solves: ctrl.solves,
        replans: 0,
    })
}

/// T-PFC from a precomputed nominal; with `replan = Some(threshold)` this is T-PFC2.
#[allow(clippy::too_many_arguments)]
pub fn run_tpfc(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    nominal: &NominalTrajectory,
    noise: &NoiseConfig,
    run: u64,
    replan: Option<f64>,
    settings: &SolverSettings,
) -> Result<ClosedLoopRun> {
    if (&nominal.trajectory.states[0] - x0).amax() != 0.0 {
        return Err(Error::Contract("nominal does not start at x0".into()));
    }
    let mut ctrl = PerturbationFeedback::new(model, cost, nominal, settings.clone(), replan);
    let horizon = nominal.trajectory.horizon();
    let trajectory = rollout(model, cost, x0, &mut ctrl, noise, run, horizon)?;
    Ok(ClosedLoopRun {
        trajectory,
        degraded: ctrl.degraded,
        replans: ctrl.replans,
        solves: Vec::new(),
    })
}

/// Solves the nominal from `x0` then runs T-PFC (or T-PFC2).
pub fn run_tpfc_from(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    horizon: usize,
    noise: &NoiseConfig,
    run: u64,
    replan: Option<f64>,
    settings: &SolverSettings,
) -> Result<ClosedLoopRun> {
    let nominal = solve_open_loop(model, cost, x0, horizon, settings, None)?;
    let mut out = run_tpfc(model, cost, x0, &nominal, noise, run, replan, settings)?;
    out.degraded |= !nominal.converged;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(ControllerSpec::new(ControllerKind::FixedMpc).validate().is_err());
        assert!(ControllerSpec::fixed(5).validate().is_ok());
        let mut s = ControllerSpec::new(ControllerKind::Tpfc2);
        assert_eq!(s.threshold(), 0.2);
        s.replan_threshold = Some(0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn default_labels() {
        assert_eq!(ControllerSpec::fixed(5).label(), "fixed_mpc_h5");
        assert_eq!(ControllerSpec::new(ControllerKind::Tpfc).label(), "tpfc");
        assert_eq!(ControllerSpec::new(ControllerKind::Tpfc).with_label("x").label(), "x");
    }
}
