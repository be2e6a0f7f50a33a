//! Tabular dynamic programming for scalar-state models.
//!
//! The backward sweep enumerates, for every grid point `x_j`, every grid point
//! `x_k` as the noise-free destination, inverts the Euler step for the control
//! that reaches it, and keeps the destination with the smallest stage cost plus
//! expected cost-to-go. Expectations are taken over
//! `x' = x_k + epsilon * sigma * sqrt(dt) * z`, `z ~ N(0, 1)`, by Monte Carlo
//! sampling or Gauss-Hermite quadrature, with the next value function
//! interpolated off-grid.
//!
//! Monte Carlo draws are shared by every `(j, k)` pair within one time layer and
//! are independent across layers.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::model::ControlAffineModel;
use crate::noise::{standard_normals, TAG_GRID};
use crate::quadrature::GaussHermite;
use crate::rollout::Controller;

const SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        let g = Self { lo, hi, n_points };
        g.validate().map_err(Error::Contract)?;
        Ok(g)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(format!("grid needs lo < hi, got [{}, {}]", self.lo, self.hi));
        }
        if self.n_points < 2 {
            return Err("grid needs at least 2 points".into());
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        if j == self.n_points - 1 {
            self.hi
        } else {
            self.lo + j as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.point(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    MonteCarlo { samples: usize },
    Quadrature { nodes: usize },
}

impl Default for Expectation {
    fn default() -> Self {
        Expectation::MonteCarlo { samples: 100 }
    }
}

impl Expectation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            Expectation::MonteCarlo { samples: 0 } => Err("monte_carlo needs samples >= 1".into()),
            Expectation::Quadrature { nodes: 0 } => Err("quadrature needs nodes >= 1".into()),
            _ => Ok(()),
        }
    }

    /// Standard-normal nodes and weights for layer `t`.
    fn rule(&self, seed: u64, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match *self {
            Expectation::MonteCarlo { samples } => {
                if samples == 0 {
                    return Err(Error::Contract("n_samples must be >= 1".into()));
                }
                let z = standard_normals(&[TAG_GRID, seed, t as u64], samples);
                Ok((z.as_slice().to_vec(), vec![1.0 / samples as f64; samples]))
            }
            Expectation::Quadrature { nodes } => {
                let q = GaussHermite::new(nodes)?;
                Ok((q.nodes().to_vec(), q.weights().to_vec()))
            }
        }
    }

    fn mc_samples(&self) -> usize {
        match *self {
            Expectation::MonteCarlo { samples } => samples,
            Expectation::Quadrature { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDpOptions {
    /// Noise standard deviation before epsilon scaling.
    pub sigma: f64,
    pub expectation: Expectation,
    pub interpolation: Interpolation,
    /// Added to the clamped boundary value for queries outside `[lo, hi]`.
    pub boundary_penalty: f64,
}

impl GridDpOptions {
    pub fn new(sigma: f64, expectation: Expectation) -> Self {
        Self {
            sigma,
            expectation,
            interpolation: Interpolation::Linear,
            boundary_penalty: 0.0,
        }
    }
}

/// Evaluates a tabulated row at `x`.
pub fn interpolate(
    row: &[f64],
    grid: &GridSpec,
    x: f64,
    mode: Interpolation,
    boundary_penalty: f64,
) -> f64 {
    let n = grid.n_points;
    if x < grid.lo {
        return row[0] + boundary_penalty;
    }
    if x > grid.hi {
        return row[n - 1] + boundary_penalty;
    }
    let s = (x - grid.lo) / grid.spacing();
    let nearest = s.round();
    if mode == Interpolation::Nearest || (s - nearest).abs() < SNAP_TOLERANCE {
        return row[(nearest as usize).min(n - 1)];
    }
    let i = (s.floor() as usize).min(n - 2);
    let frac = s - i as f64;
    row[i] * (1.0 - frac) + row[i + 1] * frac
}

/// Control that moves the noise-free Euler step from `x` to `x_next`:
/// `u = ((x_next - x) / dt - f(x)) / g(x)`.
pub fn invert_control_1d(model: &ControlAffineModel, x: f64, x_next: f64) -> Result<f64> {
    if model.state_dim() != 1 || model.control_dim() != 1 {
        return Err(Error::Contract("control inversion needs a scalar model".into()));
    }
    let xv = DVector::from_element(1, x);
    let gain = model.input_matrix(&xv)[(0, 0)];
    if gain.abs() <= 1e-12 {
        return Err(Error::SingularInput { x, gain });
    }
    let drift = model.drift(&xv)[0];
    Ok(((x_next - x) / model.dt() - drift) / gain)
}

/// Mean and standard error of `J_next` over the noisy successor of a known
/// noise-free successor `mean_next`.
fn expectation_about(
    j_next: &[f64],
    grid: &GridSpec,
    mean_next: f64,
    spread: f64,
    nodes: &[f64],
    weights: &[f64],
    opts: &GridDpOptions,
) -> (f64, f64) {
    if spread == 0.0 {
        return (interpolate(j_next, grid, mean_next, opts.interpolation, opts.boundary_penalty), 0.0);
    }
    let mut mean = 0.0;
    let mut second = 0.0;
    for (&z, &w) in nodes.iter().zip(weights) {
        let v = interpolate(j_next, grid, mean_next + spread * z, opts.interpolation, opts.boundary_penalty);
        mean += w * v;
        second += w * v * v;
    }
    let stderr = match opts.expectation {
        Expectation::MonteCarlo { samples } if samples > 1 => {
            let var = (second - mean * mean).max(0.0) * samples as f64 / (samples - 1) as f64;
            (var / samples as f64).sqrt()
        }
        _ => 0.0,
    };
    (mean, stderr)
}

/// `E[J_next(x + (f + g u) dt + epsilon * sigma * sqrt(dt) * z)]` with the
/// expectation rule of layer `t` under `seed`.
///
/// Returns the estimate and its Monte Carlo standard error (zero for quadrature
/// or `epsilon = 0`).
#[allow(clippy::too_many_arguments)]
pub fn expected_next_value(
    j_next: &[f64],
    grid: &GridSpec,
    model: &ControlAffineModel,
    x: f64,
    u: f64,
    epsilon: f64,
    opts: &GridDpOptions,
    seed: u64,
    t: usize,
) -> Result<(f64, f64)> {
    if j_next.len() != grid.n_points {
        return Err(Error::Contract("value row does not match the grid".into()));
    }
    let mean_next = model
        .step_nominal(&DVector::from_element(1, x), &DVector::from_element(1, u))?[0];
    let (nodes, weights) = opts.expectation.rule(seed, t)?;
    let spread = epsilon * opts.sigma * model.dt().sqrt();
    Ok(expectation_about(j_next, grid, mean_next, spread, &nodes, &weights, opts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction {
    /// `(T + 1) x n_points`, row `t` holds `J(t, .)`.
    pub values: DMatrix<f64>,
    /// `T x n_points`, row `t` holds `u(t, .)`; NaN where no transition is feasible.
    pub controls: DMatrix<f64>,
    pub grid: GridSpec,
    pub epsilon: f64,
    /// Monte Carlo samples per expectation, 0 for quadrature.
    pub mc_samples: usize,
    /// Grid entries with no feasible transition (value `+inf`).
    pub infeasible: usize,
}

impl GridValueFunction {
    pub fn horizon(&self) -> usize {
        self.controls.nrows()
    }

    fn row(m: &DMatrix<f64>, t: usize) -> Vec<f64> {
        m.row(t).iter().copied().collect()
    }

    pub fn value_row(&self, t: usize) -> Vec<f64> {
        Self::row(&self.values, t)
    }

    pub fn control_row(&self, t: usize) -> Vec<f64> {
        Self::row(&self.controls, t)
    }

    /// Linearly interpolated value at time `t`, clamped to the grid.
    pub fn value_at(&self, t: usize, x: f64) -> f64 {
        interpolate(&self.value_row(t), &self.grid, x, Interpolation::Linear, 0.0)
    }

    /// Linearly interpolated control at time `t`, clamped to the grid.
    pub fn control_at(&self, t: usize, x: f64) -> f64 {
        interpolate(&self.control_row(t), &self.grid, x, Interpolation::Linear, 0.0)
    }

    /// Writes `t,j,x,value,control` rows after a `#` metadata line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# lo={} hi={} n_points={} epsilon={} mc_samples={}",
            self.grid.lo, self.grid.hi, self.grid.n_points, self.epsilon, self.mc_samples
        )
        .map_err(|e| Error::Io(e.to_string()))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "j", "x", "value", "control"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for t in 0..self.values.nrows() {
            for j in 0..self.grid.n_points {
                let control = if t < self.horizon() {
                    format!("{:?}", self.controls[(t, j)])
                } else {
                    String::new()
                };
                w.write_record([
                    t.to_string(),
                    j.to_string(),
                    format!("{:?}", self.grid.point(j)),
                    format!("{:?}", self.values[(t, j)]),
                    control,
                ])
                .map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header).map_err(|e| Error::Io(e.to_string()))?;
        let meta = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Io("missing `#` metadata line".into()))?;
        let field = |key: &str| -> Result<String> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
                .ok_or_else(|| Error::Io(format!("metadata lacks `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?
                .parse::<f64>()
                .map_err(|e| Error::Io(format!("bad `{key}`: {e}")))
        };
        let grid = GridSpec::new(num("lo")?, num("hi")?, num("n_points")? as usize)?;
        let epsilon = num("epsilon")?;
        let mc_samples = num("mc_samples")? as usize;

        let mut rows: Vec<(usize, usize, f64, Option<f64>)> = Vec::new();
        let mut reader = csv::Reader::from_reader(input);
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(format!("line {}: {e}", line + 3)))?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Io(format!("line {}: column {i}: {e}", line + 3)))
            };
            let control = match rec.get(4) {
                Some("") | None => None,
                Some(_) => Some(parse(4)?),
            };
            rows.push((parse(0)? as usize, parse(1)? as usize, parse(3)?, control));
        }
        let steps = rows.iter().map(|r| r.0).max().unwrap_or(0);
        let mut values = DMatrix::from_element(steps + 1, grid.n_points, f64::NAN);
        let mut controls = DMatrix::from_element(steps, grid.n_points, f64::NAN);
        for (t, j, v, u) in rows {
            if j >= grid.n_points {
                return Err(Error::Io(format!("grid index {j} out of range")));
            }
            values[(t, j)] = v;
            if let (Some(u), true) = (u, t < steps) {
                controls[(t, j)] = u;
            }
        }
        let infeasible = values.iter().filter(|v| v.is_infinite()).count();
        Ok(Self {
            values,
            controls,
            grid,
            epsilon,
            mc_samples,
            infeasible,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn check_scalar(model: &ControlAffineModel, grid: &GridSpec, opts: &GridDpOptions, epsilon: f64) -> Result<()> {
    if model.state_dim() != 1 || model.control_dim() != 1 {
        return Err(Error::Contract("grid DP supports scalar-state, scalar-input models only".into()));
    }
    grid.validate().map_err(Error::Contract)?;
    opts.expectation.validate().map_err(Error::Contract)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Contract("epsilon must be >= 0".into()));
    }
    if !(opts.sigma >= 0.0 && opts.sigma.is_finite()) {
        return Err(Error::Contract("sigma must be >= 0".into()));
    }
    Ok(())
}

fn terminal_row(cost: &dyn CostModel, grid: &GridSpec) -> Vec<f64> {
    grid.points()
        .iter()
        .map(|&x| cost.terminal_cost(&DVector::from_element(1, x)))
        .collect()
}

fn scalar_stage_cost(cost: &dyn CostModel, x: f64, u: f64, dt: f64) -> f64 {
    cost.stage_cost(&DVector::from_element(1, x), &DVector::from_element(1, u), dt)
}

/// Optimal stochastic value function and policy on the grid.
pub fn solve_grid_dp(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    grid: &GridSpec,
    horizon: usize,
    epsilon: f64,
    opts: &GridDpOptions,
    seed: u64,
) -> Result<GridValueFunction> {
    check_scalar(model, grid, opts, epsilon)?;
    let n = grid.n_points;
    let dt = model.dt();
    let points = grid.points();
    let spread = epsilon * opts.sigma * dt.sqrt();
    let mut values = DMatrix::zeros(horizon + 1, n);
    let mut controls = DMatrix::zeros(horizon, n);
    let mut next = terminal_row(cost, grid);
    values.row_mut(horizon).copy_from_slice(&next);
    let mut infeasible = 0;

    // Transition controls do not depend on t.
    let transitions: Vec<Vec<Option<(f64, f64)>>> = points
        .par_iter()
        .map(|&x| {
            points
                .iter()
                .map(|&y| {
                    invert_control_1d(model, x, y)
                        .ok()
                        .map(|u| (u, scalar_stage_cost(cost, x, u, dt)))
                        .filter(|(u, c)| u.is_finite() && c.is_finite())
                })
                .collect()
        })
        .collect();

    for t in (0..horizon).rev() {
        let (nodes, weights) = opts.expectation.rule(seed, t)?;
        let smoothed: Vec<f64> = points
            .par_iter()
            .map(|&xk| expectation_about(&next, grid, xk, spread, &nodes, &weights, opts).0)
            .collect();
        let layer: Vec<(f64, f64)> = transitions
            .par_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, f64::NAN);
                for (k, tr) in row.iter().enumerate() {
                    let Some((u, c)) = *tr else { continue };
                    let v = c + smoothed[k];
                    if v < best.0 || (v == best.0 && u.abs() < best.1.abs()) {
                        best = (v, u);
                    }
                }
                best
            })
            .collect();
        for (j, &(v, u)) in layer.iter().enumerate() {
            if v.is_infinite() {
                infeasible += 1;
            }
            values[(t, j)] = v;
            controls[(t, j)] = u;
        }
        next = layer.iter().map(|p| p.0).collect();
    }

    Ok(GridValueFunction {
        values,
        controls,
        grid: *grid,
        epsilon,
        mc_samples: opts.expectation.mc_samples(),
        infeasible,
    })
}

/// Cost-to-go of a fixed policy `u = policy(t, x)` on the stochastic system,
/// by a backward sweep without minimization.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy_on_grid(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    grid: &GridSpec,
    horizon: usize,
    epsilon: f64,
    policy: &(dyn Fn(usize, f64) -> f64 + Sync),
    opts: &GridDpOptions,
    seed: u64,
) -> Result<GridValueFunction> {
    check_scalar(model, grid, opts, epsilon)?;
    let n = grid.n_points;
    let dt = model.dt();
    let points = grid.points();
    let spread = epsilon * opts.sigma * dt.sqrt();
    let mut values = DMatrix::zeros(horizon + 1, n);
    let mut controls = DMatrix::zeros(horizon, n);
    let mut next = terminal_row(cost, grid);
    values.row_mut(horizon).copy_from_slice(&next);
    let mut infeasible = 0;

    for t in (0..horizon).rev() {
        let (nodes, weights) = opts.expectation.rule(seed, t)?;
        let layer: Vec<(f64, f64)> = points
            .par_iter()
            .map(|&x| {
                let u = policy(t, x);
                let xv = DVector::from_element(1, x);
                let uv = DVector::from_element(1, u);
                match model.step_nominal(&xv, &uv) {
                    Ok(mean_next) => {
                        let ev = expectation_about(&next, grid, mean_next[0], spread, &nodes, &weights, opts).0;
                        (scalar_stage_cost(cost, x, u, dt) + ev, u)
                    }
                    Err(_) => (f64::INFINITY, u),
                }
            })
            .collect();
        for (j, &(v, u)) in layer.iter().enumerate() {
            if !v.is_finite() {
                infeasible += 1;
            }
            values[(t, j)] = v;
            controls[(t, j)] = u;
        }
        next = layer.iter().map(|p| p.0).collect();
    }

    Ok(GridValueFunction {
        values,
        controls,
        grid: *grid,
        epsilon,
        mc_samples: opts.expectation.mc_samples(),
        infeasible,
    })
}

/// State feedback that interpolates the tabulated policy `u(t, .)`.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    value_function: GridValueFunction,
}

impl GridPolicy {
    pub fn control_at(&self, t: usize, x: f64) -> f64 {
        self.value_function.control_at(t, x)
    }

    pub fn value_function(&self) -> &GridValueFunction {
        &self.value_function
    }
}

pub fn dp_policy_controller(value_function: GridValueFunction) -> GridPolicy {
    GridPolicy { value_function }
}

impl Controller for GridPolicy {
    fn control(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if t >= self.value_function.horizon() {
            return Err(Error::Contract(format!("step {t} beyond the tabulated horizon")));
        }
        if x.len() != 1 {
            return Err(Error::Contract("grid policy needs a scalar state".into()));
        }
        let u = self.control_at(t, x[0]);
        if !u.is_finite() {
            return Err(Error::Numeric(format!("no feasible grid control at x = {}", x[0])));
        }
        Ok(DVector::from_element(1, u))
    }
}
