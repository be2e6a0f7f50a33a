//! Near-optimal feedback control of stochastic nonlinear systems.
//!
//! Deterministic trajectory optimization (iLQR) supplies a nominal plan; the
//! controllers in [`mpc`] close the loop around it either by re-solving
//! (shrinking or fixed-horizon MPC) or with linear perturbation feedback whose
//! gains come from [`tpfc`]. [`grid_dp`] solves scalar problems exactly on a grid
//! and serves as the reference, and [`evaluation`] runs Monte Carlo comparisons
//! and the small-noise scaling checks.

pub mod cost;
pub mod error;
pub mod evaluation;
pub mod grid_dp;
pub mod model;
pub mod models;
pub mod mpc;
pub mod noise;
pub mod openloop;
pub mod quadrature;
pub mod rollout;
pub mod tpfc;

pub use nalgebra::{DMatrix, DVector};

pub use cost::{CostModel, QuadraticCost};
pub use error::{Error, Result};
pub use evaluation::{
    closeness_order_check, epsilon_sweep, expansion_fit, fit_line, lemma1_scaling_check, mean_std,
    monte_carlo_eval, monte_carlo_runs, spearman, ClosenessResult, ExpansionFit, Lemma1Result, LineFit,
    Problem, RolloutStats, RunRecord, SweepTable,
};
pub use grid_dp::{
    dp_policy_controller, evaluate_policy_on_grid, expected_next_value, invert_control_1d, solve_grid_dp,
    Expectation, GridDpOptions, GridPolicy, GridSpec, GridValueFunction, Interpolation,
};
pub use model::{ControlAffineModel, DerivativeMode, Dynamics};
pub use models::{build_model, ModelParams, ParamValue, MODEL_NAMES};
pub use mpc::{ClosedLoopRun, ControllerKind, ControllerSpec};
pub use noise::{NoiseConfig, SigmaRule};
pub use openloop::{costates, minimum_principle_residual, solve_open_loop, NominalTrajectory, SolverSettings};
pub use quadrature::GaussHermite;
pub use rollout::{forward_pass, rollout, Controller, Trajectory};
pub use tpfc::{backward_gain_pass, lqr_gain_pass, FeedbackPolicy};
