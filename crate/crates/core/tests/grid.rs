//! Grid dynamic programming: Bellman consistency and the small worked examples.

use nearopt_core::models::{linear, system1};
use nearopt_core::{
    dp_policy_controller, evaluate_policy_on_grid, expected_next_value, invert_control_1d, solve_grid_dp, Controller,
    CostModel, DMatrix, DVector, Expectation, GridDpOptions, GridSpec, GridValueFunction, QuadraticCost,
};

fn s1() -> (nearopt_core::ControlAffineModel, QuadraticCost) {
    (system1(0.02), QuadraticCost::diagonal(&[1.0], &[1.0], &[100.0], &[4.8]).unwrap())
}

const SIGMA: f64 = 3.26;

fn quad() -> GridDpOptions {
    GridDpOptions::new(SIGMA, Expectation::Quadrature { nodes: 7 })
}

fn mc(samples: usize) -> GridDpOptions {
    GridDpOptions::new(SIGMA, Expectation::MonteCarlo { samples })
}

fn stage(cost: &QuadraticCost, x: f64, u: f64, dt: f64) -> f64 {
    cost.stage_cost(&DVector::from_element(1, x), &DVector::from_element(1, u), dt)
}

#[test]
fn control_inversion_examples() {
    let (m, _) = s1();
    let x: f64 = 0.3;
    let drift_only = x - x.cos() * 0.02;
    assert!(invert_control_1d(&m, x, drift_only).unwrap().abs() < 1e-12);
    assert!((invert_control_1d(&m, 1.0, 1.0).unwrap() - 1f64.cos()).abs() < 1e-14);
    assert!((invert_control_1d(&m, 1.0, 1.0).unwrap() - 0.5403023).abs() < 1e-7);
    let lin = linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 0.02).unwrap();
    assert!((invert_control_1d(&lin, 0.0, 0.1).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn next_value_examples() {
    let (m, _) = s1();
    let grid = GridSpec::new(0.0, 5.0, 101).unwrap();
    let pts = grid.points();
    let row: Vec<f64> = pts.iter().map(|x| (x * 1.3).sin() + x).collect();
    let x: f64 = 2.0;
    let u = 0.7;
    let det = x + (-x.cos() + u) * 0.02;
    let (v, se) = expected_next_value(&row, &grid, &m, x, u, 0.0, &mc(17), 1, 0).unwrap();
    let lo = ((det - 0.0) / grid.spacing()).floor() as usize;
    let frac = (det - pts[lo]) / grid.spacing();
    assert!((v - (row[lo] * (1.0 - frac) + row[lo + 1] * frac)).abs() < 1e-12);
    assert_eq!(se, 0.0);

    let constant = vec![4.25; 101];
    for eps in [0.0, 0.3, 1.0] {
        let (c, _) = expected_next_value(&constant, &grid, &m, x, u, eps, &mc(50), 2, 3).unwrap();
        assert!((c - 4.25).abs() < 1e-12);
    }

    // Linear row, noise well inside the grid: unbiased up to Monte Carlo error.
    let affine: Vec<f64> = pts.iter().map(|x| 3.0 * x - 1.0).collect();
    for seed in 0..20 {
        let (e, se) = expected_next_value(&affine, &grid, &m, x, u, 0.5, &mc(200), seed, 4).unwrap();
        assert!((e - (3.0 * det - 1.0)).abs() <= 3.0 * se + 1e-12, "seed {seed}: {e} se {se}");
    }
}

#[test]
fn zero_horizon_is_terminal_row() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 50).unwrap();
    let v = solve_grid_dp(&m, &cost, &grid, 0, 0.3, &quad(), 1).unwrap();
    for (j, x) in grid.points().iter().enumerate() {
        assert_eq!(v.values[(0, j)], cost.terminal_cost(&DVector::from_element(1, *x)));
    }
}

#[test]
fn zero_cost_driftless_problem() {
    let lin = linear(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), 0.02).unwrap();
    let cost = QuadraticCost::diagonal(&[0.0], &[1.0], &[0.0], &[0.0]).unwrap();
    let grid = GridSpec::new(-1.0, 1.0, 41).unwrap();
    let v = solve_grid_dp(&lin, &cost, &grid, 10, 0.0, &quad(), 1).unwrap();
    assert!(v.values.iter().all(|&x| x == 0.0));
    assert!(v.controls.iter().all(|&u| u == 0.0));
}

/// Re-evaluates the Bellman right-hand side at the tabulated control.
fn bellman_rhs(v: &GridValueFunction, m: &nearopt_core::ControlAffineModel, cost: &QuadraticCost, opts: &GridDpOptions, seed: u64, t: usize, j: usize) -> (f64, f64) {
    let x = v.grid.point(j);
    let u = v.controls[(t, j)];
    let next = v.value_row(t + 1);
    let (e, se) = expected_next_value(&next, &v.grid, m, x, u, v.epsilon, opts, seed, t).unwrap();
    (stage(cost, x, u, m.dt()) + e, se)
}

#[test]
fn quadrature_bellman_residual_is_tight() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 120).unwrap();
    let v = solve_grid_dp(&m, &cost, &grid, 20, 0.4, &quad(), 1).unwrap();
    for t in 0..20 {
        for j in 0..grid.n_points {
            let (rhs, _) = bellman_rhs(&v, &m, &cost, &quad(), 1, t, j);
            let lhs = v.values[(t, j)];
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "t={t} j={j}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn monte_carlo_bellman_residual_within_standard_errors() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 120).unwrap();
    let opts = mc(200);
    let v = solve_grid_dp(&m, &cost, &grid, 20, 0.4, &opts, 1).unwrap();
    let mut within = 0;
    let mut total = 0;
    for t in 0..20 {
        for j in 0..grid.n_points {
            let (own, se_own) = bellman_rhs(&v, &m, &cost, &opts, 1, t, j);
            assert!((own - v.values[(t, j)]).abs() <= 1e-9 * own.abs().max(1.0));
            let (fresh, se_fresh) = bellman_rhs(&v, &m, &cost, &opts, 777, t, j);
            let combined = (se_own * se_own + se_fresh * se_fresh).sqrt();
            total += 1;
            if (fresh - v.values[(t, j)]).abs() <= 3.0 * combined + 1e-12 {
                within += 1;
            }
        }
    }
    assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
}

#[test]
fn evaluating_the_optimal_policy_reproduces_values() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 120).unwrap();
    for opts in [quad(), mc(100)] {
        let v = solve_grid_dp(&m, &cost, &grid, 20, 0.4, &opts, 5).unwrap();
        let policy = |t: usize, x: f64| v.control_at(t, x);
        let phi = evaluate_policy_on_grid(&m, &cost, &grid, 20, 0.4, &policy, &opts, 5).unwrap();
        for t in 0..=20 {
            for j in 0..grid.n_points {
                let (a, b) = (v.values[(t, j)], phi.values[(t, j)]);
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "t={t} j={j}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn deterministic_policy_without_noise_matches_deterministic_values() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 200).unwrap();
    let v = solve_grid_dp(&m, &cost, &grid, 50, 0.0, &quad(), 1).unwrap();
    let policy = |t: usize, x: f64| v.control_at(t, x);
    let phi = evaluate_policy_on_grid(&m, &cost, &grid, 50, 0.0, &policy, &quad(), 1).unwrap();
    assert!((v.value_at(0, 1.0) - phi.value_at(0, 1.0)).abs() <= 1e-9 * v.value_at(0, 1.0));
}

#[test]
fn grid_policy_interpolation_examples() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 51).unwrap();
    let v = solve_grid_dp(&m, &cost, &grid, 5, 0.0, &quad(), 1).unwrap();
    let mut ctrl = dp_policy_controller(v.clone());
    let x = |s: f64| DVector::from_element(1, s);
    for j in [0, 7, 50] {
        assert_eq!(ctrl.control(2, &x(grid.point(j))).unwrap()[0], v.controls[(2, j)]);
    }
    let mid = 0.5 * (grid.point(7) + grid.point(8));
    let expect = 0.5 * (v.controls[(2, 7)] + v.controls[(2, 8)]);
    assert!((ctrl.control(2, &x(mid)).unwrap()[0] - expect).abs() < 1e-12);
    assert_eq!(ctrl.control(2, &x(-3.0)).unwrap()[0], v.controls[(2, 0)]);
    assert_eq!(ctrl.control(2, &x(9.0)).unwrap()[0], v.controls[(2, 50)]);
}

#[test]
fn value_function_csv_round_trip() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 30).unwrap();
    let v = solve_grid_dp(&m, &cost, &grid, 4, 0.2, &mc(20), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    v.save(&path).unwrap();
    let back = GridValueFunction::load(&path).unwrap();
    assert_eq!(back, v);
}

#[test]
fn grid_results_are_reproducible() {
    let (m, cost) = s1();
    let grid = GridSpec::new(0.0, 5.0, 80).unwrap();
    let a = solve_grid_dp(&m, &cost, &grid, 10, 0.5, &mc(50), 9).unwrap();
    let b = solve_grid_dp(&m, &cost, &grid, 10, 0.5, &mc(50), 9).unwrap();
    assert_eq!(a, b);
    let c = solve_grid_dp(&m, &cost, &grid, 10, 0.5, &mc(50), 10).unwrap();
    assert_ne!(a.values, c.values);
}

/// Least squares of `y` on `{eps^2, eps^4}`: coefficient of `eps^2` and its standard error.
fn eps2_coefficient(eps: &[f64], y: &[f64]) -> (f64, f64) {
    let n = eps.len();
    let x = DMatrix::from_fn(n, 2, |i, c| eps[i].powi(2 * (c as i32 + 1)));
    let yv = DVector::from_column_slice(y);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &yv;
    let resid = &yv - &x * &beta;
    let s2 = resid.norm_squared() / (n - 2) as f64;
    (beta[0], (s2 * xtx_inv[(0, 0)]).sqrt())
}

#[test]
fn gap_has_no_second_order_component() {
    let (m, cost) = s1();
    let grid = GridSpec::new(-2.0, 8.0, 1600).unwrap();
    let eps = [0.05, 0.1, 0.2];
    let det = solve_grid_dp(&m, &cost, &grid, 50, 0.0, &quad(), 1).unwrap();
    let j0 = det.value_at(0, 1.0);
    let policy = |t: usize, x: f64| det.control_at(t, x);
    let mut j = Vec::new();
    let mut phi = Vec::new();
    for &e in &eps {
        j.push(solve_grid_dp(&m, &cost, &grid, 50, e, &quad(), 1).unwrap().value_at(0, 1.0) - j0);
        phi.push(evaluate_policy_on_grid(&m, &cost, &grid, 50, e, &policy, &quad(), 1).unwrap().value_at(0, 1.0) - j0);
    }
    let gap: Vec<f64> = phi.iter().zip(&j).map(|(a, b)| a - b).collect();
    let (g2, g2_se) = eps2_coefficient(&eps, &gap);
    let (j2, j2_se) = eps2_coefficient(&eps, &j);
    let (p2, p2_se) = eps2_coefficient(&eps, &phi);
    assert!(g2.abs() <= 2.0 * g2_se, "gap eps^2 coefficient {g2} +- {g2_se}");
    assert!(j2.abs() > 2.0 * j2_se && p2.abs() > 2.0 * p2_se);
    // The cancellation is not an artifact of a wide error bar.
    assert!(g2.abs() < 0.01 * j2.abs());
}
