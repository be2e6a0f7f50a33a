//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nearopt_cli::{run_experiment, ExperimentConfig, RunOptions};
use nearopt_core::models::{car, linear, system1, system2};
use nearopt_core::noise::u_avg_sigma;
use nearopt_core::{
    backward_gain_pass, closeness_order_check, evaluate_policy_on_grid, expansion_fit, expected_next_value,
    lemma1_scaling_check, lqr_gain_pass, monte_carlo_eval, solve_grid_dp, solve_open_loop, spearman, ControlAffineModel,
    ControllerKind, ControllerSpec, CostModel, DMatrix, DVector, DerivativeMode, Expectation, GridDpOptions, GridSpec,
    NoiseConfig, Problem, QuadraticCost, RolloutStats, SolverSettings,
};

type Outcome = Result<String, String>;

fn system_cost() -> QuadraticCost {
    QuadraticCost::diagonal(&[1.0], &[1.0], &[100.0], &[4.8]).unwrap()
}

fn x1() -> DVector<f64> {
    DVector::from_element(1, 1.0)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, elapsed: Duration, detail: String) -> Outcome {
    if elapsed <= limit {
        Ok(detail)
    } else {
        Err(format!("{detail}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
    }
}

/// Deterministic grid DP against the open-loop optimum on system 1.
fn criterion_1() -> Outcome {
    let m = system1(0.02);
    let cost = system_cost();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let grid = GridSpec::new(0.0, 5.0, 200).unwrap();
    let opts = GridDpOptions::new(1.0, Expectation::Quadrature { nodes: 7 });
    let v = solve_grid_dp(&m, &cost, &grid, 50, 0.0, &opts, 1).map_err(|e| e.to_string())?;
    let dp = v.value_at(0, 1.0);
    let rel = (dp - nominal.cost()).abs() / nominal.cost();
    check(rel <= 0.02, format!("grid DP {dp:.6} vs open loop {:.6}, relative {rel:.4} (<= 0.02)", nominal.cost()))
}

/// Independent discrete Riccati recursion (no library gain code).
fn riccati_gains(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, qt: &DMatrix<f64>, dt: f64, horizon: usize) -> Vec<DMatrix<f64>> {
    let mut p = qt.clone();
    let mut ks = Vec::new();
    for _ in 0..horizon {
        let s = r * dt + b.transpose() * &p * b;
        let k = -s.try_inverse().unwrap() * b.transpose() * &p * a;
        p = q * dt + a.transpose() * &p * a + a.transpose() * &p * b * &k;
        ks.push(k);
    }
    ks.reverse();
    ks
}

fn criterion_2() -> Outcome {
    let a_c = DMatrix::from_row_slice(4, 4, &[0.0, 1.0, 0.0, 0.0, -2.0, -0.3, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.4, 0.0, -1.0, -0.2]);
    let b_c = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.2, 1.0]);
    let dt = 0.02;
    let (q, r, qt) = ([1.0, 0.5, 2.0, 0.1], [0.3, 0.7], [20.0, 5.0, 20.0, 5.0]);
    let m = linear(a_c.clone(), b_c.clone(), dt).unwrap();
    let cost = QuadraticCost::diagonal(&q, &r, &qt, &[0.0; 4]).unwrap();
    let x0 = DVector::from_column_slice(&[1.0, 0.0, -0.5, 0.2]);
    let nominal = solve_open_loop(&m, &cost, &x0, 60, &SolverSettings::precise(), None).map_err(|e| e.to_string())?;
    let policy = backward_gain_pass(&m, &cost, &nominal).map_err(|e| e.to_string())?;
    let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
    let oracle = riccati_gains(&(DMatrix::identity(4, 4) + a_c * dt), &(b_c * dt), &diag(&q), &diag(&r), &diag(&qt), dt, 60);
    let lin_dev = policy.gains.iter().zip(&oracle).map(|(k, o)| (k - o).amax()).fold(0.0, f64::max);

    let s1 = system1(0.02);
    let c1 = system_cost();
    let nom1 = solve_open_loop(&s1, &c1, &x1(), 50, &SolverSettings::precise(), None).map_err(|e| e.to_string())?;
    let tpfc = backward_gain_pass(&s1, &c1, &nom1).map_err(|e| e.to_string())?;
    let lqr = lqr_gain_pass(&s1, &c1, &nom1).map_err(|e| e.to_string())?;
    let s1_dev = tpfc.gains.iter().zip(&lqr.gains).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    check(
        lin_dev <= 1e-8 && s1_dev >= 1e-3,
        format!("linear max |K - K_lqr| = {lin_dev:.2e} (<= 1e-8); system 1 max deviation = {s1_dev:.3e} (>= 1e-3)"),
    )
}

/// Co-states against central differences of re-solved cost-to-go.
fn criterion_3() -> Outcome {
    let m = system1(0.02);
    let cost = system_cost();
    let settings = SolverSettings::precise();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &settings, None).map_err(|e| e.to_string())?;
    let policy = backward_gain_pass(&m, &cost, &nominal).map_err(|e| e.to_string())?;
    let traj = &nominal.trajectory;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for t in (0..50).step_by(5) {
        let tail = &traj.controls[t..];
        let value = |dx: f64| {
            let x = DVector::from_element(1, traj.states[t][0] + dx);
            let sol = solve_open_loop(&m, &cost, &x, 50 - t, &settings, Some(tail)).unwrap();
            assert!(sol.converged, "re-solve at t={t} did not converge");
            sol.cost()
        };
        let fd = (value(h) - value(-h)) / (2.0 * h);
        let g = policy.costates[t][0];
        worst = worst.max((fd - g).abs() / g.abs());
    }
    check(worst <= 1e-3, format!("max relative co-state error over 10 steps = {worst:.2e} (<= 1e-3)"))
}

fn system1_policy() -> Result<(ControlAffineModel, nearopt_core::FeedbackPolicy, DVector<f64>), String> {
    let m = system1(0.02);
    let cost = system_cost();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let sigma = u_avg_sigma(&m, &nominal.trajectory);
    let policy = backward_gain_pass(&m, &cost, &nominal).map_err(|e| e.to_string())?;
    Ok((m, policy, sigma))
}

fn criterion_4() -> Outcome {
    let (m, policy, sigma) = system1_policy()?;
    let res = lemma1_scaling_check(&m, &policy, &sigma, &[0.025, 0.05, 0.1, 0.2], 200, 4).map_err(|e| e.to_string())?;
    let slope = res.slope.ok_or("no slope")?.slope;
    check((1.7..=2.3).contains(&slope), format!("slope {slope:.3} in [1.7, 2.3]; dropped {:?}", res.dropped))
}

fn criterion_5() -> Outcome {
    let m = system1(0.02);
    let cost = system_cost();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let sigma = u_avg_sigma(&m, &nominal.trajectory);
    let problem = Problem::new(&m, &cost, x1(), 50, sigma);
    let spec = ControllerSpec::new(ControllerKind::Tpfc);
    let rows: Vec<RolloutStats> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        .iter()
        .map(|&e| monte_carlo_eval(&problem, &spec, e, 1000, 5))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<&RolloutStats> = rows.iter().collect();
    let fit = expansion_fit(&refs, true).map_err(|e| e.to_string())?;
    let (j0, s0) = fit.j0();
    let (c3, s3) = fit.cubic().unwrap();
    let z0 = (j0 - nominal.cost()).abs() / s0;
    let z3 = c3.abs() / s3;
    check(
        z0 <= 2.0 && z3 <= 2.0,
        format!("J0 = {j0:.4} +- {s0:.4} vs nominal {:.4} (z = {z0:.2}); eps^3 coefficient {c3:.3} +- {s3:.3} (z = {z3:.2})", nominal.cost()),
    )
}

fn criterion_6() -> Outcome {
    let m = system1(0.02);
    let cost = system_cost();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let sigma = u_avg_sigma(&m, &nominal.trajectory)[0];
    let grid = GridSpec::new(-2.0, 8.0, 3200).unwrap();
    let opts = GridDpOptions::new(sigma, Expectation::Quadrature { nodes: 7 });
    let res = closeness_order_check(&m, &cost, &grid, 1.0, 50, &[0.1, 0.15, 0.2, 0.3], &opts, 6, 10.0).map_err(|e| e.to_string())?;
    let admitted: Vec<String> = res
        .points
        .iter()
        .map(|p| format!("{}:{:.2e}{}", p.epsilon, p.gap, if p.admitted { "" } else { "(floor)" }))
        .collect();
    match res.slope {
        Some(f) => check(f.slope >= 3.0, format!("slope {:.3} (>= 3.0) over gaps {}", f.slope, admitted.join(" "))),
        None => Err(format!("fewer than two admitted points: {}", admitted.join(" "))),
    }
}

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, m) in [("system1", system1(0.02)), ("system2", system2(0.02))] {
        let cost = system_cost();
        let nominal = solve_open_loop(&m, &cost, &x1(), 50, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
        let sigma = u_avg_sigma(&m, &nominal.trajectory);
        let grid = GridSpec::new(0.0, 5.0, 200).unwrap();
        let problem = Problem::new(&m, &cost, x1(), 50, sigma.clone())
            .with_grid(grid, GridDpOptions::new(sigma[0], Expectation::MonteCarlo { samples: 100 }));
        for eps in [0.4, 0.6, 0.8] {
            let mpc = monte_carlo_eval(&problem, &ControllerSpec::new(ControllerKind::ShrinkingMpc), eps, 100, 7).map_err(|e| e.to_string())?;
            let dp = monte_carlo_eval(&problem, &ControllerSpec::new(ControllerKind::GridDpPolicy), eps, 100, 7).map_err(|e| e.to_string())?;
            let good = mpc.mean_cost <= dp.mean_cost && mpc.std_cost <= dp.std_cost;
            ok &= good;
            lines.push(format!(
                "{name} eps {eps}: mpc {:.2}+-{:.2} vs dp {:.2}+-{:.2}{}",
                mpc.mean_cost,
                mpc.std_cost,
                dp.mean_cost,
                dp.std_cost,
                if good { "" } else { " VIOLATED" }
            ));
        }
    }
    check(ok, lines.join("; "))
}

fn criterion_8() -> Outcome {
    let m = car(0.01);
    let cost = QuadraticCost::diagonal(&[1.0; 4], &[1.0; 2], &[100.0; 4], &[1.0, 0.25, 0.5, 0.0]).unwrap();
    let x0 = DVector::zeros(4);
    let nominal = solve_open_loop(&m, &cost, &x0, 30, &SolverSettings::default(), None).map_err(|e| e.to_string())?;
    let sigma = u_avg_sigma(&m, &nominal.trajectory);
    let problem = Problem::new(&m, &cost, x0, 30, sigma);
    let run = |spec: &ControllerSpec, eps: f64| monte_carlo_eval(&problem, spec, eps, 100, 8).map_err(|e| e.to_string());
    let mpc_spec = ControllerSpec::new(ControllerKind::ShrinkingMpc);

    let fh = run(&ControllerSpec::fixed(5), 0.5)?;
    let mpc_half = run(&mpc_spec, 0.5)?;
    let fh_ok = fh.mean_cost > mpc_half.mean_cost;

    let mut close_ok = true;
    let mut worst_z: f64 = 0.0;
    for eps in [0.05, 0.1, 0.15, 0.2] {
        let a = run(&mpc_spec, eps)?;
        let b = run(&ControllerSpec::new(ControllerKind::Tpfc), eps)?;
        let z = (a.mean_cost - b.mean_cost).abs() / (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        worst_z = worst_z.max(z);
        close_ok &= z < 2.0;
    }

    let sweep = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];
    let mut replans = Vec::new();
    for &eps in &sweep {
        replans.push(run(&ControllerSpec::new(ControllerKind::Tpfc2), eps)?.replan_stats.map(|r| r.0).unwrap_or(f64::NAN));
    }
    let rho = spearman(&sweep, &replans);
    check(
        fh_ok && close_ok && rho > 0.8,
        format!(
            "fixed H=5 {:.2} > shrinking {:.2} at eps 0.5; max |MPC - T-PFC| / combined stderr for eps <= 0.2 = {worst_z:.2} (< 2); T-PFC2 replans {replans:?}, Spearman {rho:.3} (> 0.8)",
            fh.mean_cost, mpc_half.mean_cost
        ),
    )
}

fn bundled_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    v.sort();
    v
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for path in bundled_configs() {
        let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let budget = cfg.experiment.runtime_budget_s.unwrap_or(f64::INFINITY);
        let mut dirs = Vec::new();
        for (k, jobs) in [(0, None), (1, Some(2))] {
            let out = tmp.path().join(format!("{stem}-{k}"));
            let start = Instant::now();
            run_experiment(&cfg, &RunOptions { output_dir: Some(out.clone()), jobs, ..RunOptions::default() })
                .map_err(|e| format!("{stem}: {e}"))?;
            let secs = start.elapsed().as_secs_f64();
            if secs > budget {
                return Err(format!("{stem} took {secs:.0}s, declared budget {budget}s"));
            }
            dirs.push(out);
        }
        for f in ["sweep.csv", "costs.csv", "replan.csv"] {
            let a = std::fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{stem}/{f} differs between reruns"));
            }
        }
        summary.push(stem);
    }
    Ok(format!("identical sweep/costs/replan CSVs on rerun (1 vs 2 threads) for {}", summary.join(", ")))
}

/// Compact instances of the property suites (the full randomized versions live in
/// the core crate's tests).
fn criterion_10() -> Outcome {
    let m = system1(0.02);
    let cost = system_cost();
    let settings = SolverSettings::default();
    let nominal = solve_open_loop(&m, &cost, &x1(), 50, &settings, None).map_err(|e| e.to_string())?;

    // Cost-to-go Hessian symmetry on the car.
    let car_m = car(0.01);
    let car_cost = QuadraticCost::diagonal(&[1.0; 4], &[1.0; 2], &[100.0; 4], &[1.0, 0.25, 0.5, 0.0]).unwrap();
    let car_nom = solve_open_loop(&car_m, &car_cost, &DVector::zeros(4), 30, &settings, None).map_err(|e| e.to_string())?;
    let pol = backward_gain_pass(&car_m, &car_cost, &car_nom).map_err(|e| e.to_string())?;
    let asym = pol.hessians.iter().map(|h| (h - h.transpose()).amax()).fold(0.0, f64::max);
    if asym > 1e-12 {
        return Err(format!("P asymmetry {asym:e}"));
    }

    // Quadrature Bellman residual.
    let grid = GridSpec::new(0.0, 5.0, 100).unwrap();
    let opts = GridDpOptions::new(3.0, Expectation::Quadrature { nodes: 7 });
    let v = solve_grid_dp(&m, &cost, &grid, 10, 0.4, &opts, 1).map_err(|e| e.to_string())?;
    let mut bellman: f64 = 0.0;
    for t in 0..10 {
        for j in 0..grid.n_points {
            let (x, u) = (grid.point(j), v.controls[(t, j)]);
            let (e, _) = expected_next_value(&v.value_row(t + 1), &grid, &m, x, u, 0.4, &opts, 1, t).map_err(|e| e.to_string())?;
            let rhs = cost.stage_cost(&DVector::from_element(1, x), &DVector::from_element(1, u), 0.02) + e;
            bellman = bellman.max((rhs - v.values[(t, j)]).abs() / rhs.abs().max(1.0));
        }
    }
    let policy = |t: usize, x: f64| v.control_at(t, x);
    let phi = evaluate_policy_on_grid(&m, &cost, &grid, 10, 0.4, &policy, &opts, 1).map_err(|e| e.to_string())?;
    bellman = bellman.max((&phi.values - &v.values).amax() / v.values.amax());
    if bellman > 1e-9 {
        return Err(format!("Bellman residual {bellman:e}"));
    }

    // Analytic against finite-difference derivatives.
    let fd = m.with_mode(DerivativeMode::FiniteDifference).map_err(|e| e.to_string())?;
    let mut deriv: f64 = 0.0;
    for i in 0..100 {
        let x = DVector::from_element(1, -3.0 + 0.07 * i as f64);
        let u = DVector::from_element(1, 0.5);
        let (a1, _) = m.linearize(&x, &u).map_err(|e| e.to_string())?;
        let (a2, _) = fd.linearize(&x, &u).map_err(|e| e.to_string())?;
        deriv = deriv.max((a1 - a2).amax());
    }
    if deriv > 1e-8 {
        return Err(format!("derivative mismatch {deriv:e}"));
    }

    // Zero noise: seed independence; warm start: idempotence.
    for seed in [1, 99] {
        let noise = NoiseConfig::new(0.0, DVector::from_element(1, 3.0), seed).map_err(|e| e.to_string())?;
        let r = nearopt_core::mpc::run_tpfc(&m, &cost, &x1(), &nominal, &noise, seed, Some(0.2), &settings).map_err(|e| e.to_string())?;
        if r.trajectory.states != nominal.trajectory.states {
            return Err("zero-noise rollout depends on the seed".into());
        }
    }
    let again = solve_open_loop(&m, &cost, &x1(), 50, &settings, Some(&nominal.trajectory.controls)).map_err(|e| e.to_string())?;
    if again.trajectory != nominal.trajectory {
        return Err("warm start from the solution moved it".into());
    }
    Ok(format!("P asymmetry {asym:.1e}, Bellman residual {bellman:.1e}, derivative gap {deriv:.1e}, seed independence and warm-start idempotence exact"))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "DP / open-loop agreement", Duration::from_secs(30), criterion_1),
        (2, "LQR reduction", Duration::from_secs(5), criterion_2),
        (3, "co-state oracle", Duration::from_secs(120), criterion_3),
        (4, "linear-deviation scaling", Duration::from_secs(120), criterion_4),
        (5, "series structure", Duration::from_secs(180), criterion_5),
        (6, "closeness order", Duration::from_secs(600), criterion_6),
        (7, "MPC vs stochastic DP", Duration::from_secs(900), criterion_7),
        (8, "car controllers", Duration::from_secs(1800), criterion_8),
        (9, "determinism", Duration::MAX, criterion_9),
        (10, "property suites", Duration::from_secs(300), criterion_10),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = f().and_then(|d| if limit == Duration::MAX { Ok(d) } else { within(limit, start.elapsed(), d) });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
