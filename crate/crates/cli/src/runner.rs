//! Executes a validated experiment config and writes its artifacts.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nearopt_core::grid_dp::{solve_grid_dp, GridDpOptions};
use nearopt_core::{
    backward_gain_pass, closeness_order_check, epsilon_sweep, expansion_fit, lemma1_scaling_check, solve_open_loop,
    ClosenessResult, DVector, ExpansionFit, Lemma1Result, Problem, QuadraticCost, SolverSettings, SweepTable,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Command-line overrides applied on top of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub output_dir: PathBuf,
    pub cell_failures: usize,
    /// Names of configured checks that did not pass.
    pub failed_checks: Vec<String>,
}

impl Outcome {
    /// 0 success, 2 failed sweep cell, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        if self.cell_failures > 0 {
            2
        } else if !self.failed_checks.is_empty() {
            3
        } else {
            0
        }
    }
}

#[derive(Debug, Serialize)]
struct DpOpenLoopReport {
    dp_value: f64,
    open_loop_cost: f64,
    relative_error: f64,
    tolerance: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct ExpansionReport {
    controller: String,
    nominal_cost: f64,
    fit: ExpansionFit,
    j0_z: f64,
    cubic_z: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct Lemma1Report {
    result: Lemma1Result,
    slope_min: f64,
    slope_max: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct ClosenessReport {
    result: ClosenessResult,
    min_slope: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct CellFailureReport {
    controller: String,
    epsilon: f64,
    message: String,
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    nominal_cost: f64,
    nominal_converged: bool,
    sigma: Vec<f64>,
    cell_failures: Vec<CellFailureReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dp_open_loop: Option<DpOpenLoopReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expansion_fit: Option<ExpansionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lemma1: Option<Lemma1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closeness: Option<ClosenessReport>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    resolved_sigma: Vec<f64>,
    config: &'a ExperimentConfig,
}

/// The config after command-line overrides.
pub fn resolve_config(config: &ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    let mut cfg = config.clone();
    if let Some(seed) = opts.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(dir) = &opts.output_dir {
        cfg.experiment.output_dir = Some(dir.clone());
    }
    cfg
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.experiment.output_dir.clone().unwrap_or_else(|| Path::new("out").join(&cfg.experiment.name))
}

/// Runs the sweep and checks, writing `sweep.csv`, `costs.csv`, `replan.csv`,
/// `diagnostics.json` and `manifest.json`.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let cfg = resolve_config(config, opts);
    cfg.validate()?;
    match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| execute(&cfg)),
        None => execute(&cfg),
    }
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(BufWriter<File>) -> Result<(), CliError>,
{
    let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f(BufWriter::new(file))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_replans(table: &SweepTable, horizon: usize, out: BufWriter<File>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["controller", "epsilon", "replan_mean", "replan_std", "replans_per_step"]).map_err(io)?;
    for r in &table.rows {
        if let Some((m, s)) = r.replan_stats {
            w.write_record([
                r.controller.clone(),
                format!("{:?}", r.epsilon),
                format!("{m:?}"),
                format!("{s:?}"),
                format!("{:?}", m / horizon as f64),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(CliError::from)
}

fn execute(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let seed = cfg.experiment.seed;
    let model = cfg.build_model()?;
    let cost = QuadraticCost::diagonal(&cfg.cost.q, &cfg.cost.r, &cfg.cost.q_terminal, &cfg.cost.target)?;
    let x0 = DVector::from_column_slice(&cfg.problem.x0);
    let horizon = cfg.problem.horizon;
    let nominal = solve_open_loop(&model, &cost, &x0, horizon, &SolverSettings::default(), None)?;
    let sigma = cfg.noise.sigma.resolve(&model, &nominal.trajectory)?;

    let dp_options = |grid_sigma: f64| GridDpOptions {
        interpolation: cfg.dp.interpolation,
        boundary_penalty: cfg.dp.boundary_penalty,
        ..GridDpOptions::new(grid_sigma, cfg.expectation)
    };
    let mut problem = Problem::new(&model, &cost, x0.clone(), horizon, sigma.clone());
    problem.independent_streams = cfg.noise.independent_streams;
    if let Some(grid) = &cfg.grid {
        problem = problem.with_grid(grid.clone(), dp_options(sigma[0]));
    }

    let table = epsilon_sweep(&problem, &cfg.controllers, &cfg.sweep.epsilons, cfg.experiment.n_runs, seed)?;
    let mut failed_checks = Vec::new();
    let checks = &cfg.checks;

    let dp_open_loop = match (&checks.dp_open_loop, &cfg.grid) {
        (Some(c), Some(grid)) => {
            let v = solve_grid_dp(&model, &cost, grid, horizon, 0.0, &dp_options(sigma[0]), seed)?;
            let dp_value = v.value_at(0, x0[0]);
            let relative_error = (dp_value - nominal.cost()).abs() / nominal.cost().abs();
            let passed = relative_error <= c.tolerance;
            if !passed {
                failed_checks.push("dp_open_loop".to_string());
            }
            Some(DpOpenLoopReport { dp_value, open_loop_cost: nominal.cost(), relative_error, tolerance: c.tolerance, passed })
        }
        _ => None,
    };

    let expansion = match &checks.expansion_fit {
        Some(c) => {
            let rows = table.rows_for(&c.controller);
            let report = expansion_fit(&rows, true).map(|fit| {
                let (j0, s0) = fit.j0();
                let (c3, s3) = fit.cubic().unwrap_or((0.0, 0.0));
                let j0_z = (j0 - nominal.cost()).abs() / s0;
                let cubic_z = c3.abs() / s3;
                let passed = j0_z <= c.max_z && cubic_z <= c.max_z;
                ExpansionReport { controller: c.controller.clone(), nominal_cost: nominal.cost(), fit, j0_z, cubic_z, passed }
            });
            match report {
                Ok(r) => {
                    if !r.passed {
                        failed_checks.push("expansion_fit".to_string());
                    }
                    Some(r)
                }
                Err(e) => {
                    failed_checks.push(format!("expansion_fit ({e})"));
                    None
                }
            }
        }
        None => None,
    };

    let lemma1 = match &checks.lemma1 {
        Some(c) => {
            let policy = backward_gain_pass(&model, &cost, &nominal)?;
            let result = lemma1_scaling_check(&model, &policy, &sigma, &c.epsilons, c.n_runs, seed)?;
            let passed = result
                .slope
                .map(|f| f.slope >= c.slope_min && f.slope <= c.slope_max)
                .unwrap_or(false);
            if !passed {
                failed_checks.push("lemma1".to_string());
            }
            Some(Lemma1Report { result, slope_min: c.slope_min, slope_max: c.slope_max, passed })
        }
        None => None,
    };

    let closeness = match &checks.closeness {
        Some(c) => {
            let grid = c.grid.as_ref().or(cfg.grid.as_ref()).expect("validated");
            let result = closeness_order_check(
                &model,
                &cost,
                grid,
                x0[0],
                horizon,
                &c.epsilons,
                &dp_options(sigma[0]),
                seed,
                c.floor_factor,
            )?;
            let passed = result.slope.map(|f| f.slope >= c.min_slope).unwrap_or(false);
            if !passed {
                failed_checks.push("closeness".to_string());
            }
            Some(ClosenessReport { result, min_slope: c.min_slope, passed })
        }
        None => None,
    };

    let dir = output_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_with(&dir.join("sweep.csv"), |w| table.write_csv(w).map_err(CliError::from))?;
    write_with(&dir.join("costs.csv"), |w| table.write_runs_csv(w).map_err(CliError::from))?;
    write_with(&dir.join("replan.csv"), |w| write_replans(&table, horizon, w))?;
    let diagnostics = Diagnostics {
        nominal_cost: nominal.cost(),
        nominal_converged: nominal.converged,
        sigma: sigma.iter().copied().collect(),
        cell_failures: table
            .failures
            .iter()
            .map(|f| CellFailureReport { controller: f.controller.clone(), epsilon: f.epsilon, message: f.message.clone() })
            .collect(),
        dp_open_loop,
        expansion_fit: expansion,
        lemma1,
        closeness,
    };
    write_json(&dir.join("diagnostics.json"), &diagnostics)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            resolved_sigma: sigma.iter().copied().collect(),
            config: cfg,
        },
    )?;
    Ok(Outcome { output_dir: dir, cell_failures: table.failures.len(), failed_checks })
}
