use criterion::{criterion_group, criterion_main, Criterion};
use nearopt_core::models::{car, system1};
use nearopt_core::{
    backward_gain_pass, solve_grid_dp, solve_open_loop, DVector, Expectation, GridDpOptions, GridSpec, QuadraticCost,
    SolverSettings,
};

fn open_loop(c: &mut Criterion) {
    let model = system1(0.02);
    let cost = QuadraticCost::diagonal(&[1.0], &[1.0], &[100.0], &[4.8]).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    c.bench_function("ilqr_system1_T50", |b| {
        b.iter(|| solve_open_loop(&model, &cost, &x0, 50, &SolverSettings::default(), None).unwrap())
    });

    let car = car(0.01);
    let car_cost = QuadraticCost::diagonal(&[1.0; 4], &[1.0; 2], &[100.0; 4], &[1.0, 0.25, 0.5, 0.0]).unwrap();
    let car_x0 = DVector::zeros(4);
    c.bench_function("ilqr_car_T30", |b| {
        b.iter(|| solve_open_loop(&car, &car_cost, &car_x0, 30, &SolverSettings::default(), None).unwrap())
    });
    let nominal = solve_open_loop(&car, &car_cost, &car_x0, 30, &SolverSettings::default(), None).unwrap();
    c.bench_function("gain_pass_car_T30", |b| b.iter(|| backward_gain_pass(&car, &car_cost, &nominal).unwrap()));
}

fn grid_dp(c: &mut Criterion) {
    let model = system1(0.02);
    let cost = QuadraticCost::diagonal(&[1.0], &[1.0], &[100.0], &[4.8]).unwrap();
    let grid = GridSpec::new(0.0, 5.0, 100).unwrap();
    let opts = GridDpOptions::new(3.26, Expectation::Quadrature { nodes: 7 });
    let mut group = c.benchmark_group("grid_dp");
    group.sample_size(10);
    group.bench_function("system1_100pts_T50_quadrature", |b| {
        b.iter(|| solve_grid_dp(&model, &cost, &grid, 50, 0.2, &opts, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, open_loop, grid_dp);
criterion_main!(benches);
