//! Built-in models and the name-based registry used by experiment configs.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlAffineModel, DerivativeMode, Dynamics};

/// `x' = -cos(x) + u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct System1;

impl Dynamics for System1 {
    fn name(&self) -> &str {
        "system1"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, -x[0].cos())
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn drift_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, x[0].sin()))
    }
    fn input_jacobian(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(1, 1)])
    }
    fn drift_hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::from_element(1, 1, x[0].cos())])
    }
    fn input_hessians(&self, _x: &DVector<f64>) -> Option<Vec<Vec<DMatrix<f64>>>> {
        Some(vec![vec![DMatrix::zeros(1, 1)]])
    }
}

/// `x' = -x - 2x^2 - 0.5x^3 + u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct System2;

impl Dynamics for System2 {
    fn name(&self) -> &str {
        "system2"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = x[0];
        DVector::from_element(1, -v - 2.0 * v * v - 0.5 * v * v * v)
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn drift_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let v = x[0];
        Some(DMatrix::from_element(1, 1, -1.0 - 4.0 * v - 1.5 * v * v))
    }
    fn input_jacobian(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(1, 1)])
    }
    fn drift_hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::from_element(1, 1, -4.0 - 3.0 * x[0])])
    }
    fn input_hessians(&self, _x: &DVector<f64>) -> Option<Vec<Vec<DMatrix<f64>>>> {
        Some(vec![vec![DMatrix::zeros(1, 1)]])
    }
}

/// Kinematic car: state `(px, py, heading, steer)`, controls `(speed, steer rate)`.
///
/// `px' = v cos(heading)`, `py' = v sin(heading)`, `heading' = v tan(steer) / L`,
/// `steer' = omega`. The drift is zero; all nonlinearity sits in the input matrix.
#[derive(Debug, Clone, Copy)]
pub struct CarLike {
    pub wheelbase: f64,
}

impl Default for CarLike {
    fn default() -> Self {
        Self { wheelbase: 0.5 }
    }
}

impl Dynamics for CarLike {
    fn name(&self) -> &str {
        "car"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (th, phi) = (x[2], x[3]);
        let mut g = DMatrix::zeros(4, 2);
        g[(0, 0)] = th.cos();
        g[(1, 0)] = th.sin();
        g[(2, 0)] = phi.tan() / self.wheelbase;
        g[(3, 1)] = 1.0;
        g
    }
    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(4, 4))
    }
    fn input_jacobian(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let (th, phi) = (x[2], x[3]);
        let mut gx = vec![DMatrix::zeros(4, 2); 4];
        gx[2][(0, 0)] = -th.sin();
        gx[2][(1, 0)] = th.cos();
        let sec = 1.0 / phi.cos();
        gx[3][(2, 0)] = sec * sec / self.wheelbase;
        Some(gx)
    }
    fn drift_hessians(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        Some(vec![DMatrix::zeros(4, 4); 4])
    }
    fn input_hessians(&self, x: &DVector<f64>) -> Option<Vec<Vec<DMatrix<f64>>>> {
        let (th, phi) = (x[2], x[3]);
        let mut speed = vec![DMatrix::zeros(4, 4); 4];
        speed[0][(2, 2)] = -th.cos();
        speed[1][(2, 2)] = -th.sin();
        let sec = 1.0 / phi.cos();
        speed[2][(3, 3)] = 2.0 * sec * sec * phi.tan() / self.wheelbase;
        let steer = vec![DMatrix::zeros(4, 4); 4];
        Some(vec![speed, steer])
    }
}

/// Cart-pole with the pole angle measured from upright, force input on the cart.
///
/// Only the vector field is provided; derivatives come from finite differences.
#[derive(Debug, Clone, Copy)]
pub struct CartPole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half-length of the pole.
    pub pole_length: f64,
    pub gravity: f64,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartPole {
    /// Returns `(drift, input column)` of the affine acceleration map.
    fn affine_parts(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (xd, th, thd) = (x[1], x[2], x[3]);
        let total = self.cart_mass + self.pole_mass;
        let (s, c) = th.sin_cos();
        let ml = self.pole_mass * self.pole_length;
        let denom = self.pole_length * (4.0 / 3.0 - self.pole_mass * c * c / total);
        let th_acc0 = (self.gravity * s - c * ml * thd * thd * s / total) / denom;
        let th_acc_f = -c / (total * denom);
        let x_acc0 = ml * thd * thd * s / total - ml * c * th_acc0 / total;
        let x_acc_f = 1.0 / total - ml * c * th_acc_f / total;
        (
            DVector::from_vec(vec![xd, x_acc0, thd, th_acc0]),
            DVector::from_vec(vec![0.0, x_acc_f, 0.0, th_acc_f]),
        )
    }
}

impl Dynamics for CartPole {
    fn name(&self) -> &str {
        "cartpole"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.affine_parts(x).0
    }
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let col = self.affine_parts(x).1;
        DMatrix::from_column_slice(4, 1, col.as_slice())
    }
}

/// `x' = M x + B u` with constant matrices.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() || b.ncols() == 0 {
            return Err(Error::Contract(format!(
                "linear model needs square A and matching B, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
    fn input_jacobian(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let (n, p) = self.b.shape();
        Some(vec![DMatrix::zeros(n, p); n])
    }
    fn drift_hessians(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        let n = self.a.nrows();
        Some(vec![DMatrix::zeros(n, n); n])
    }
    fn input_hessians(&self, _x: &DVector<f64>) -> Option<Vec<Vec<DMatrix<f64>>>> {
        let (n, p) = self.b.shape();
        Some(vec![vec![DMatrix::zeros(n, n); n]; p])
    }
}

/// A scalar or list parameter from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    List(Vec<f64>),
}

pub type ModelParams = BTreeMap<String, ParamValue>;

pub const MODEL_NAMES: &[(&str, &str)] = &[
    ("system1", "1-D: x' = -cos(x) + u"),
    ("system2", "1-D: x' = -x - 2x^2 - 0.5x^3 + u"),
    ("car", "kinematic car (px, py, heading, steer); params: wheelbase"),
    (
        "cartpole",
        "cart-pole, finite-difference derivatives; params: cart_mass, pole_mass, pole_length, gravity",
    ),
    ("linear", "x' = A x + B u; params: a (row-major n*n), b (row-major n*p)"),
];

fn scalar(params: &ModelParams, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(ParamValue::Scalar(v)) => Ok(*v),
        Some(ParamValue::List(_)) => Err(Error::Contract(format!("parameter `{key}` must be a scalar"))),
    }
}

fn list<'a>(params: &'a ModelParams, key: &str) -> Result<&'a [f64]> {
    match params.get(key) {
        Some(ParamValue::List(v)) => Ok(v),
        Some(ParamValue::Scalar(_)) => Err(Error::Contract(format!("parameter `{key}` must be a list"))),
        None => Err(Error::Contract(format!("missing parameter `{key}`"))),
    }
}

fn check_known(params: &ModelParams, known: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !known.contains(&k.as_str()) {
            return Err(Error::Contract(format!("unknown model parameter `{k}`")));
        }
    }
    Ok(())
}

/// Builds the vector field registered under `name`.
pub fn build_dynamics(name: &str, params: &ModelParams) -> Result<Arc<dyn Dynamics>> {
    match name {
        "system1" => {
            check_known(params, &[])?;
            Ok(Arc::new(System1))
        }
        "system2" => {
            check_known(params, &[])?;
            Ok(Arc::new(System2))
        }
        "car" => {
            check_known(params, &["wheelbase"])?;
            let wheelbase = scalar(params, "wheelbase", CarLike::default().wheelbase)?;
            if wheelbase <= 0.0 {
                return Err(Error::Contract("wheelbase must be positive".into()));
            }
            Ok(Arc::new(CarLike { wheelbase }))
        }
        "cartpole" => {
            check_known(params, &["cart_mass", "pole_mass", "pole_length", "gravity"])?;
            let d = CartPole::default();
            Ok(Arc::new(CartPole {
                cart_mass: scalar(params, "cart_mass", d.cart_mass)?,
                pole_mass: scalar(params, "pole_mass", d.pole_mass)?,
                pole_length: scalar(params, "pole_length", d.pole_length)?,
                gravity: scalar(params, "gravity", d.gravity)?,
            }))
        }
        "linear" => {
            check_known(params, &["a", "b"])?;
            let a = list(params, "a")?;
            let b = list(params, "b")?;
            let n = (a.len() as f64).sqrt().round() as usize;
            if n == 0 || n * n != a.len() || b.is_empty() || b.len() % n != 0 {
                return Err(Error::Contract(
                    "linear model: `a` must hold n*n entries and `b` n*p entries".into(),
                ));
            }
            let p = b.len() / n;
            Ok(Arc::new(LinearModel::new(
                DMatrix::from_row_slice(n, n, a),
                DMatrix::from_row_slice(n, p, b),
            )?))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// Models without analytic derivatives use finite differences.
pub fn default_mode(name: &str) -> DerivativeMode {
    match name {
        "cartpole" => DerivativeMode::FiniteDifference,
        _ => DerivativeMode::Analytic,
    }
}

pub fn build_model(name: &str, params: &ModelParams, dt: f64) -> Result<ControlAffineModel> {
    let dynamics = build_dynamics(name, params)?;
    ControlAffineModel::new(dynamics, dt, default_mode(name))
}

pub fn system1(dt: f64) -> ControlAffineModel {
    ControlAffineModel::new(Arc::new(System1), dt, DerivativeMode::Analytic).expect("valid model")
}

pub fn system2(dt: f64) -> ControlAffineModel {
    ControlAffineModel::new(Arc::new(System2), dt, DerivativeMode::Analytic).expect("valid model")
}

pub fn car(dt: f64) -> ControlAffineModel {
    ControlAffineModel::new(Arc::new(CarLike::default()), dt, DerivativeMode::Analytic)
        .expect("valid model")
}

pub fn cartpole(dt: f64) -> ControlAffineModel {
    ControlAffineModel::new(Arc::new(CartPole::default()), dt, DerivativeMode::FiniteDifference)
        .expect("valid model")
}

pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<ControlAffineModel> {
    ControlAffineModel::new(Arc::new(LinearModel::new(a, b)?), dt, DerivativeMode::Analytic)
}
