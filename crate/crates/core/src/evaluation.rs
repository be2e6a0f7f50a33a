//! Monte Carlo evaluation of controllers and empirical checks of the
//! small-noise expansion.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::grid_dp::{
    dp_policy_controller, evaluate_policy_on_grid, solve_grid_dp, Expectation, GridDpOptions,
    GridSpec, GridValueFunction,
};
use crate::model::ControlAffineModel;
use crate::mpc::{run_fixed_mpc, run_shrinking_mpc, run_tpfc, ClosedLoopRun, ControllerKind, ControllerSpec};
use crate::noise::{mix_key, NoiseConfig};
use crate::openloop::{solve_open_loop, NominalTrajectory};
use crate::rollout::{rollout, OpenLoop};
use crate::tpfc::FeedbackPolicy;

/// Everything a closed-loop evaluation needs besides the controller and epsilon.
#[derive(Clone)]
pub struct Problem<'a> {
    pub model: &'a ControlAffineModel,
    pub cost: &'a dyn CostModel,
    pub x0: DVector<f64>,
    pub horizon: usize,
    /// Per-coordinate noise standard deviation before epsilon scaling.
    pub sigma: DVector<f64>,
    /// Grid and expectation rule for `grid_dp_policy` controllers.
    pub grid: Option<(GridSpec, GridDpOptions)>,
    /// Give each controller its own disturbance stream instead of common random numbers.
    pub independent_streams: bool,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a ControlAffineModel, cost: &'a dyn CostModel, x0: DVector<f64>, horizon: usize, sigma: DVector<f64>) -> Self {
        Self { model, cost, x0, horizon, sigma, grid: None, independent_streams: false }
    }

    pub fn with_grid(mut self, grid: GridSpec, options: GridDpOptions) -> Self {
        self.grid = Some((grid, options));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub controller: String,
    pub epsilon: f64,
    /// Completed runs entering the statistics.
    pub n_runs: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub stderr: f64,
    pub degraded_runs: usize,
    pub replan_stats: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub controller: String,
    pub epsilon: f64,
    pub run: u64,
    pub cost: f64,
    pub replans: usize,
    pub degraded: bool,
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one sample),
/// summed in index order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Shifted by the first sample so identical samples give exactly zero spread.
    let v0 = values[0];
    let shift = values.iter().map(|v| v - v0).sum::<f64>() / n as f64;
    let mean = v0 + shift;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - v0 - shift).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

enum Prepared {
    Shrinking,
    Fixed(usize),
    Feedback { nominal: NominalTrajectory, replan: Option<f64> },
    Replay(NominalTrajectory),
    Grid(GridValueFunction),
}

fn prepare(problem: &Problem, spec: &ControllerSpec, epsilon: f64, seed: u64) -> Result<Prepared> {
    spec.validate().map_err(Error::Contract)?;
    Ok(match spec.kind {
        ControllerKind::ShrinkingMpc => Prepared::Shrinking,
        ControllerKind::FixedMpc => Prepared::Fixed(spec.fixed_horizon.unwrap_or(1)),
        ControllerKind::Tpfc | ControllerKind::Tpfc2 => {
            let nominal = solve_open_loop(problem.model, problem.cost, &problem.x0, problem.horizon, &spec.solver, None)?;
            let replan = (spec.kind == ControllerKind::Tpfc2).then(|| spec.threshold());
            Prepared::Feedback { nominal, replan }
        }
        ControllerKind::OpenLoop => Prepared::Replay(solve_open_loop(
            problem.model,
            problem.cost,
            &problem.x0,
            problem.horizon,
            &spec.solver,
            None,
        )?),
        ControllerKind::GridDpPolicy => {
            let (grid, opts) = problem
                .grid
                .as_ref()
                .ok_or_else(|| Error::Contract("grid_dp_policy needs a grid".into()))?;
            let dp_eps = spec.dp_epsilon.unwrap_or(epsilon);
            let mut opts = *opts;
            opts.sigma = problem.sigma[0];
            Prepared::Grid(solve_grid_dp(problem.model, problem.cost, grid, problem.horizon, dp_eps, &opts, seed)?)
        }
    })
}

fn run_once(problem: &Problem, spec: &ControllerSpec, prepared: &Prepared, noise: &NoiseConfig, run: u64) -> Result<ClosedLoopRun> {
    let (model, cost, x0, horizon) = (problem.model, problem.cost, &problem.x0, problem.horizon);
    match prepared {
        Prepared::Shrinking => run_shrinking_mpc(model, cost, x0, horizon, noise, run, &spec.solver),
        Prepared::Fixed(w) => run_fixed_mpc(model, cost, x0, horizon, *w, noise, run, &spec.solver),
        Prepared::Feedback { nominal, replan } => {
            let mut out = run_tpfc(model, cost, x0, nominal, noise, run, *replan, &spec.solver)?;
            out.degraded |= !nominal.converged;
            Ok(out)
        }
        Prepared::Replay(nominal) => {
            let mut ctrl = OpenLoop::new(nominal.trajectory.controls.clone());
            let trajectory = rollout(model, cost, x0, &mut ctrl, noise, run, horizon)?;
            Ok(ClosedLoopRun { trajectory, solves: Vec::new(), replans: 0, degraded: !nominal.converged })
        }
        Prepared::Grid(v) => {
            let mut ctrl = dp_policy_controller(v.clone());
            let trajectory = rollout(model, cost, x0, &mut ctrl, noise, run, horizon)?;
            Ok(ClosedLoopRun { trajectory, solves: Vec::new(), replans: 0, degraded: v.infeasible > 0 })
        }
    }
}

fn label_stream(label: &str) -> u64 {
    let words: Vec<u64> = label.bytes().map(u64::from).collect();
    mix_key(&words) | 1
}

/// Runs and per-run records for one `(controller, epsilon)` cell.
///
/// Run `i` uses disturbance stream `(seed, i)` for every controller. Runs that
/// fail are counted as degraded and left out of the statistics.
pub fn monte_carlo_runs(
    problem: &Problem,
    spec: &ControllerSpec,
    epsilon: f64,
    n_runs: usize,
    seed: u64,
) -> Result<(RolloutStats, Vec<RunRecord>)> {
    if n_runs == 0 {
        return Err(Error::Contract("n_runs must be >= 1".into()));
    }
    let label = spec.label();
    let mut noise = NoiseConfig::new(epsilon, problem.sigma.clone(), seed)?;
    if problem.independent_streams {
        noise = noise.with_stream(label_stream(&label));
    }
    let prepared = prepare(problem, spec, epsilon, seed)?;
    let outcomes: Vec<Option<ClosedLoopRun>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|run| run_once(problem, spec, &prepared, &noise, run).ok())
        .collect();

    let mut records = Vec::with_capacity(n_runs);
    let mut costs = Vec::new();
    let mut replans = Vec::new();
    let mut degraded = 0;
    for (run, out) in outcomes.iter().enumerate() {
        match out {
            Some(r) if r.trajectory.total_cost.is_finite() => {
                costs.push(r.trajectory.total_cost);
                replans.push(r.replans as f64);
                degraded += r.degraded as usize;
                records.push(RunRecord {
                    controller: label.clone(),
                    epsilon,
                    run: run as u64,
                    cost: r.trajectory.total_cost,
                    replans: r.replans,
                    degraded: r.degraded,
                });
            }
            _ => {
                degraded += 1;
                records.push(RunRecord {
                    controller: label.clone(),
                    epsilon,
                    run: run as u64,
                    cost: f64::NAN,
                    replans: 0,
                    degraded: true,
                });
            }
        }
    }
    if costs.is_empty() {
        return Err(Error::Numeric(format!("every run of `{label}` failed at epsilon = {epsilon}")));
    }
    let (mean, std) = mean_std(&costs);
    let replan_stats = (spec.kind == ControllerKind::Tpfc2).then(|| mean_std(&replans));
    let stats = RolloutStats {
        controller: label,
        epsilon,
        n_runs: costs.len(),
        mean_cost: mean,
        std_cost: std,
        stderr: std / (costs.len() as f64).sqrt(),
        degraded_runs: degraded,
        replan_stats,
    };
    Ok((stats, records))
}

pub fn monte_carlo_eval(
    problem: &Problem,
    spec: &ControllerSpec,
    epsilon: f64,
    n_runs: usize,
    seed: u64,
) -> Result<RolloutStats> {
    monte_carlo_runs(problem, spec, epsilon, n_runs, seed).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub controller: String,
    pub epsilon: f64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<RolloutStats>,
    pub failures: Vec<CellFailure>,
    pub runs: Vec<RunRecord>,
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "controller", "epsilon", "n_runs", "mean_cost", "std_cost", "stderr", "degraded", "replan_mean", "replan_std",
];

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

impl SweepTable {
    pub fn rows_for(&self, controller: &str) -> Vec<&RolloutStats> {
        self.rows.iter().filter(|r| r.controller == controller).collect()
    }

    pub fn get(&self, controller: &str, epsilon: f64) -> Option<&RolloutStats> {
        self.rows.iter().find(|r| r.controller == controller && r.epsilon == epsilon)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_COLUMNS).map_err(io)?;
        for r in &self.rows {
            let (rm, rs) = match r.replan_stats {
                Some((m, s)) => (fmt(m), fmt(s)),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.controller.clone(),
                fmt(r.epsilon),
                r.n_runs.to_string(),
                fmt(r.mean_cost),
                fmt(r.std_cost),
                fmt(r.stderr),
                r.degraded_runs.to_string(),
                rm,
                rs,
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }

    /// Parses a sweep CSV; errors carry the 1-based line number.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers().map_err(|e| Error::Io(format!("line 1: {e}")))?.clone();
        if header.iter().collect::<Vec<_>>() != SWEEP_COLUMNS {
            return Err(Error::Io(format!("line 1: expected columns {}", SWEEP_COLUMNS.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Io(format!("line {line}: {e}")))?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| Error::Io(format!("line {line}: column `{}` is not a number", SWEEP_COLUMNS[c])))
            };
            let int = |c: usize| -> Result<usize> {
                rec.get(c)
                    .unwrap_or("")
                    .parse::<usize>()
                    .map_err(|_| Error::Io(format!("line {line}: column `{}` is not a count", SWEEP_COLUMNS[c])))
            };
            let replan_stats = match (rec.get(7), rec.get(8)) {
                (Some(""), Some("")) | (None, None) => None,
                _ => Some((num(7)?, num(8)?)),
            };
            rows.push(RolloutStats {
                controller: rec.get(0).unwrap_or("").to_string(),
                epsilon: num(1)?,
                n_runs: int(2)?,
                mean_cost: num(3)?,
                std_cost: num(4)?,
                stderr: num(5)?,
                degraded_runs: int(6)?,
                replan_stats,
            });
        }
        Ok(Self { rows, ..Self::default() })
    }

    /// Per-run costs: `controller,epsilon,run,cost,replans,degraded`.
    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["controller", "epsilon", "run", "cost", "replans", "degraded"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for r in &self.runs {
            w.write_record([
                r.controller.clone(),
                fmt(r.epsilon),
                r.run.to_string(),
                fmt(r.cost),
                r.replans.to_string(),
                r.degraded.to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

/// Every controller at every epsilon, with common random numbers per run index.
/// Failing cells are recorded in `failures` rather than aborting the sweep.
pub fn epsilon_sweep(
    problem: &Problem,
    controllers: &[ControllerSpec],
    eps_list: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<SweepTable> {
    if eps_list.is_empty() || controllers.is_empty() {
        return Err(Error::Contract("sweep needs at least one controller and one epsilon".into()));
    }
    if eps_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("eps_list must be strictly ascending".into()));
    }
    let mut labels: Vec<String> = controllers.iter().map(|c| c.label()).collect();
    labels.sort();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Contract("controller labels must be unique".into()));
    }
    let mut table = SweepTable::default();
    for spec in controllers {
        for &eps in eps_list {
            match monte_carlo_runs(problem, spec, eps, n_runs, seed) {
                Ok((stats, runs)) => {
                    table.rows.push(stats);
                    table.runs.extend(runs);
                }
                Err(e) => table.failures.push(CellFailure {
                    controller: spec.label(),
                    epsilon: eps,
                    message: e.to_string(),
                }),
            }
        }
    }
    Ok(table)
}

/// Ordinary least-squares line `y = a + b x` with the standard error of `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::Contract("line fit needs at least two points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Result {
    /// Epsilon values that stayed finite.
    pub epsilons: Vec<f64>,
    /// `max_t E||e_t||` per retained epsilon.
    pub error_norms: Vec<f64>,
    /// Slope of `log E||e||` against `log eps`; `None` when every error is exactly zero.
    pub slope: Option<LineFit>,
    pub dropped: Vec<f64>,
}

impl Lemma1Result {
    pub fn exact_zero(&self) -> bool {
        self.error_norms.iter().all(|&e| e == 0.0)
    }
}

/// Compares the closed-loop nonlinear deviation from the nominal with its
/// linear prediction `dx_{t+1} = (A_t + B_t K_t) dx_t + eps sqrt(dt) w_t` on
/// the same noise path, for each epsilon.
pub fn lemma1_scaling_check(
    model: &ControlAffineModel,
    policy: &FeedbackPolicy,
    sigma: &DVector<f64>,
    eps_list: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<Lemma1Result> {
    if n_runs == 0 || eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Contract("need n_runs >= 1 and positive epsilons".into()));
    }
    let traj = &policy.nominal.trajectory;
    let horizon = traj.horizon();
    let closed: Vec<DMatrix<f64>> = (0..horizon)
        .map(|t| {
            let (a, b) = model.linearize(&traj.states[t], &traj.controls[t])?;
            Ok(a + b * &policy.gains[t])
        })
        .collect::<Result<_>>()?;
    let sqrt_dt = model.dt().sqrt();

    let mut out = Lemma1Result { epsilons: Vec::new(), error_norms: Vec::new(), slope: None, dropped: Vec::new() };
    for &eps in eps_list {
        let noise = NoiseConfig::new(eps, sigma.clone(), seed)?;
        let per_run: Vec<Option<Vec<f64>>> = (0..n_runs as u64)
            .into_par_iter()
            .map(|run| {
                let mut x = traj.states[0].clone();
                let mut dl = DVector::zeros(x.len());
                let mut errs = vec![0.0; horizon + 1];
                for t in 0..horizon {
                    let u = policy.apply(&x, t).ok()?;
                    let w = noise.disturbance(run, t);
                    x = model.step(&x, &u, &w, eps).ok()?;
                    dl = &closed[t] * dl + &w * (eps * sqrt_dt);
                    errs[t + 1] = ((&x - &traj.states[t + 1]) - &dl).norm();
                    if !errs[t + 1].is_finite() {
                        return None;
                    }
                }
                Some(errs)
            })
            .collect();
        if per_run.iter().any(Option::is_none) {
            out.dropped.push(eps);
            continue;
        }
        let mut mean = vec![0.0; horizon + 1];
        for errs in per_run.iter().flatten() {
            for (m, e) in mean.iter_mut().zip(errs) {
                *m += e / n_runs as f64;
            }
        }
        out.epsilons.push(eps);
        out.error_norms.push(mean.iter().cloned().fold(0.0, f64::max));
    }
    if out.epsilons.len() >= 2 && out.error_norms.iter().all(|&e| e > 0.0) {
        let lx: Vec<f64> = out.epsilons.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = out.error_norms.iter().map(|e| e.ln()).collect();
        out.slope = Some(fit_line(&lx, &ly)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionFit {
    /// Coefficients of `1, eps^2, eps^4` (and `eps^3` last when requested).
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `||y - X beta|| / ||y||`.
    pub relative_residual: f64,
}

impl ExpansionFit {
    pub fn j0(&self) -> (f64, f64) {
        (self.coefficients[0], self.std_errors[0])
    }
    pub fn j1(&self) -> (f64, f64) {
        (self.coefficients[1], self.std_errors[1])
    }
    pub fn j2(&self) -> (f64, f64) {
        (self.coefficients[2], self.std_errors[2])
    }
    pub fn cubic(&self) -> Option<(f64, f64)> {
        self.coefficients.get(3).map(|&c| (c, self.std_errors[3]))
    }
}

/// Weighted least squares of the mean cost on `{1, eps^2, eps^4}` (plus `eps^3`
/// with `odd_term`), weights `1 / stderr^2`.
pub fn expansion_fit(rows: &[&RolloutStats], odd_term: bool) -> Result<ExpansionFit> {
    let k = if odd_term { 4 } else { 3 };
    if rows.len() < 4 {
        return Err(Error::Contract("expansion fit needs at least 4 epsilon values".into()));
    }
    let mut sq: Vec<f64> = rows.iter().map(|r| r.epsilon * r.epsilon).collect();
    sq.sort_by(f64::total_cmp);
    sq.dedup();
    if sq.len() < k {
        return Err(Error::Contract(format!("expansion fit needs {k} distinct eps^2 values")));
    }
    // Exact rows (zero stderr) get a tiny floor so they dominate without dividing by zero.
    let positive = rows.iter().map(|r| r.stderr).filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    let floor = if positive.is_finite() { positive * 1e-6 } else { 1.0 };
    let n = rows.len();
    let mut xw = DMatrix::zeros(n, k);
    let mut yw = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, k);
    for (i, r) in rows.iter().enumerate() {
        let e = r.epsilon;
        let mut basis = vec![1.0, e * e, e.powi(4)];
        if odd_term {
            basis.push(e.powi(3));
        }
        let w = 1.0 / r.stderr.max(floor);
        for (c, b) in basis.iter().enumerate() {
            x[(i, c)] = *b;
            xw[(i, c)] = b * w;
        }
        y[i] = r.mean_cost;
        yw[i] = r.mean_cost * w;
    }
    let normal = xw.transpose() * &xw;
    let cov = normal
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("expansion fit design is singular".into()))?;
    let svd = xw.clone().svd(true, true);
    let beta = svd
        .solve(&yw, 1e-14)
        .map_err(|e| Error::Numeric(format!("expansion fit: {e}")))?;
    let resid = (&y - &x * &beta).norm() / y.norm().max(f64::MIN_POSITIVE);
    Ok(ExpansionFit {
        coefficients: beta.iter().copied().collect(),
        std_errors: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        relative_residual: resid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosenessPoint {
    pub epsilon: f64,
    /// Optimal stochastic cost-to-go at `x0`.
    pub optimal: f64,
    /// Cost-to-go of the deterministic policy on the stochastic system at `x0`.
    pub deterministic_policy: f64,
    pub gap: f64,
    /// Change of the gap between the base grid and the doubled grid.
    pub grid_floor: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosenessResult {
    pub points: Vec<ClosenessPoint>,
    /// Fit of `log|gap|` on `log eps` over admitted points.
    pub slope: Option<LineFit>,
}

/// Gap between the deterministic-optimal and stochastic-optimal grid policies
/// (both evaluated on the stochastic system) at `x0`, and its order in epsilon.
///
/// A point is admitted when the gap exceeds `floor_factor` times its change
/// between `grid` and a grid with twice the points.
#[allow(clippy::too_many_arguments)]
pub fn closeness_order_check(
    model: &ControlAffineModel,
    cost: &dyn CostModel,
    grid: &GridSpec,
    x0: f64,
    horizon: usize,
    eps_list: &[f64],
    opts: &GridDpOptions,
    seed: u64,
    floor_factor: f64,
) -> Result<ClosenessResult> {
    if !matches!(opts.expectation, Expectation::Quadrature { .. }) {
        return Err(Error::Contract("closeness check requires quadrature expectations".into()));
    }
    if eps_list.is_empty() {
        return Err(Error::Contract("closeness check needs epsilon values".into()));
    }
    let refined = GridSpec::new(grid.lo, grid.hi, 2 * grid.n_points)?;
    let gaps = |g: &GridSpec| -> Result<Vec<(f64, f64)>> {
        let det = solve_grid_dp(model, cost, g, horizon, 0.0, opts, seed)?;
        let policy = |t: usize, x: f64| det.control_at(t, x);
        eps_list
            .iter()
            .map(|&eps| {
                let opt = solve_grid_dp(model, cost, g, horizon, eps, opts, seed)?;
                let phi = evaluate_policy_on_grid(model, cost, g, horizon, eps, &policy, opts, seed)?;
                Ok((opt.value_at(0, x0), phi.value_at(0, x0)))
            })
            .collect()
    };
    let base = gaps(grid)?;
    let fine = gaps(&refined)?;
    let points: Vec<ClosenessPoint> = eps_list
        .iter()
        .zip(base.iter().zip(&fine))
        .map(|(&eps, (&(j, phi), &(jf, phif)))| {
            let gap = phi - j;
            let grid_floor = (gap - (phif - jf)).abs();
            ClosenessPoint {
                epsilon: eps,
                optimal: j,
                deterministic_policy: phi,
                gap,
                grid_floor,
                admitted: eps > 0.0 && gap.abs() > floor_factor * grid_floor && gap != 0.0,
            }
        })
        .collect();
    let adm: Vec<&ClosenessPoint> = points.iter().filter(|p| p.admitted).collect();
    let slope = if adm.len() >= 2 {
        let lx: Vec<f64> = adm.iter().map(|p| p.epsilon.ln()).collect();
        let ly: Vec<f64> = adm.iter().map(|p| p.gap.abs().ln()).collect();
        Some(fit_line(&lx, &ly)?)
    } else {
        None
    };
    Ok(ClosenessResult { points, slope })
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
