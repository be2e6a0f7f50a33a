//! Trajectories and closed-loop simulation.

use nalgebra::DVector;

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::ControlAffineModel;
use crate::noise::NoiseConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 .. x_T`.
    pub states: Vec<DVector<f64>>,
    /// `u_0 .. u_{T-1}`.
    pub controls: Vec<DVector<f64>>,
    /// Running cost of each step, already multiplied by dt.
    pub stage_costs: Vec<f64>,
    pub terminal_cost: f64,
    pub total_cost: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Assembles a trajectory from states and controls, evaluating costs.
    pub fn from_path(
        model: &ControlAffineModel,
        cost: &dyn CostModel,
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::Contract(format!(
                "{} states for {} controls",
                states.len(),
                controls.len()
            )));
        }
        let dt = model.dt();
        let stage_costs: Vec<f64> = states
            .iter()
            .zip(&controls)
            .map(|(x, u)| cost.stage_cost(x, u, dt))
            .collect();
        let terminal_cost = cost.terminal_cost(states.last().expect("non-empty"));
        let total_cost = stage_costs.iter().sum::<f64>() + terminal_cost;
        if !total_cost.is_finite() {
            return Err(Error::Numeric("trajectory cost is not finite".into()));
        }
        Ok(Self {
            states,
            controls,
            stage_costs,
            terminal_cost,
            total_cost,
        })
    }

    /// Cost accumulated over the first `steps` stages.
    pub fn cost_to_date(&self, steps: usize) -> f64 {
        self.stage_costs[..steps].iter().sum()
    }
}

/// Noise-free forward simulation of an open-loop control sequence.
pub fn forward_pass(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        let next = model.step_nominal(&states[t], u).map_err(|e| e.at_step(t))?;
        states.push(next);
    }
    Trajectory::from_path(model, cost, states, controls.to_vec())
}

/// A causal state-feedback law evaluated once per step.
pub trait Controller {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Set when the controller had to fall back to a best-effort action.
    fn degraded(&self) -> bool {
        false
    }

    /// Number of times the controller re-solved its plan (beyond the initial solve).
    fn replans(&self) -> usize {
        0
    }
}

/// Replays a fixed control sequence.
#[derive(Debug, Clone)]
pub struct OpenLoop {
    controls: Vec<DVector<f64>>,
}

impl OpenLoop {
    pub fn new(controls: Vec<DVector<f64>>) -> Self {
        Self { controls }
    }
}

impl Controller for OpenLoop {
    fn control(&mut self, t: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        self.controls
            .get(t)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("open-loop sequence has no control for step {t}")))
    }
}

impl<F> Controller for F
where
    F: FnMut(usize, &DVector<f64>) -> Result<DVector<f64>>,
{
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(t, x)
    }
}

/// Simulates `horizon` steps of the stochastic closed loop for Monte Carlo run `run`.
///
/// Each step consumes exactly one disturbance sample, addressed by `(run, t)`.
pub fn rollout(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    x0: &DVector<f64>,
    controller: &mut dyn Controller,
    noise: &NoiseConfig,
    run: u64,
    horizon: usize,
) -> Result<Trajectory> {
    if noise.base_sigma.len() != model.state_dim() {
        return Err(Error::Contract("noise dimension does not match the model".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for t in 0..horizon {
        let x = &states[t];
        let u = controller.control(t, x).map_err(|e| e.at_step(t))?;
        let w = noise.disturbance(run, t);
        let next = model.step(x, &u, &w, noise.epsilon).map_err(|e| e.at_step(t))?;
        controls.push(u);
        states.push(next);
    }
    Trajectory::from_path(model, cost, states, controls)
}
