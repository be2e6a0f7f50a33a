//! Control-affine discrete-time models.
//!
//! A model is a continuous-time vector field `x' = f(x) + G(x) u` discretized with
//! forward Euler, with additive process noise scaled by `epsilon * sqrt(dt)`:
//!
//! ```text
//! x_{t+1} = x_t + (f(x_t) + G(x_t) u_t) dt + epsilon * w_t * sqrt(dt)
//! ```
//!
//! Derivatives of `f` and `G` come either from the [`Dynamics`] implementation
//! (analytic mode) or from central finite differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite_mat, ensure_finite_vec, Error, Result};

/// Continuous-time control-affine vector field.
///
/// The optional derivative methods return `None` when the implementation does not
/// provide them; [`ControlAffineModel`] then falls back to finite differences.
///
/// Tensor layouts:
/// * `drift_jacobian`: `n x n`, entry `(k, i) = d f_k / d x_i`.
/// * `input_jacobian`: one `n x p` matrix per state coordinate `i`, entry
///   `(k, j) = d G_kj / d x_i`.
/// * `drift_hessians`: one `n x n` matrix per output `k`, the Hessian of `f_k`.
/// * `input_hessians`: indexed `[j][k]`, the Hessian of `G_kj` (input column `j`,
///   output row `k`).
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn input_jacobian(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        None
    }
    fn drift_hessians(&self, _x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        None
    }
    fn input_hessians(&self, _x: &DVector<f64>) -> Option<Vec<Vec<DMatrix<f64>>>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference,
}

/// First derivatives of the continuous vector field.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub fx: DMatrix<f64>,
    /// `gx[i]` is `dG/dx_i` (`n x p`).
    pub gx: Vec<DMatrix<f64>>,
}

/// Second derivatives of the continuous vector field at a point.
#[derive(Debug, Clone)]
pub struct SecondOrder {
    /// `fxx[k]` is the Hessian of `f_k`.
    pub fxx: Vec<DMatrix<f64>>,
    /// `gxx[j][k]` is the Hessian of `G_kj`.
    pub gxx: Vec<Vec<DMatrix<f64>>>,
    /// `gx[i]` is `dG/dx_i` (`n x p`).
    pub gx: Vec<DMatrix<f64>>,
}

impl SecondOrder {
    /// Hessian of `lambda' (f(x) + G(x) u)` with respect to `x`.
    pub fn weighted_hessian(&self, lambda: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = lambda.len();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            if lambda[k] == 0.0 {
                continue;
            }
            h += &self.fxx[k] * lambda[k];
            for (j, per_input) in self.gxx.iter().enumerate() {
                if u[j] != 0.0 {
                    h += &per_input[k] * (lambda[k] * u[j]);
                }
            }
        }
        h
    }

    /// Mixed derivative `d^2 [lambda' G(x) u] / du dx`, a `p x n` matrix.
    pub fn weighted_input_jacobian(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        let n = lambda.len();
        let p = self.gxx.len();
        let mut m = DMatrix::zeros(p, n);
        for (i, gxi) in self.gx.iter().enumerate() {
            m.set_column(i, &(gxi.transpose() * lambda));
        }
        m
    }
}

/// A discretized control-affine model: vector field + time step + derivative source.
#[derive(Clone)]
pub struct ControlAffineModel {
    dynamics: Arc<dyn Dynamics>,
    dt: f64,
    mode: DerivativeMode,
}

impl fmt::Debug for ControlAffineModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineModel")
            .field("name", &self.dynamics.name())
            .field("n", &self.state_dim())
            .field("p", &self.control_dim())
            .field("dt", &self.dt)
            .field("mode", &self.mode)
            .finish()
    }
}

impl ControlAffineModel {
    pub fn new(dynamics: Arc<dyn Dynamics>, dt: f64, mode: DerivativeMode) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Contract(format!("dt must be positive, got {dt}")));
        }
        if dynamics.state_dim() == 0 || dynamics.control_dim() == 0 {
            return Err(Error::Contract("state and control dimensions must be >= 1".into()));
        }
        if mode == DerivativeMode::Analytic {
            let probe = DVector::zeros(dynamics.state_dim());
            let complete = dynamics.drift_jacobian(&probe).is_some()
                && dynamics.input_jacobian(&probe).is_some()
                && dynamics.drift_hessians(&probe).is_some()
                && dynamics.input_hessians(&probe).is_some();
            if !complete {
                return Err(Error::Contract(format!(
                    "model `{}` does not provide analytic derivatives",
                    dynamics.name()
                )));
            }
        }
        Ok(Self { dynamics, dt, mode })
    }

    pub fn name(&self) -> &str {
        self.dynamics.name()
    }
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn mode(&self) -> DerivativeMode {
        self.mode
    }
    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    /// Same vector field with a different derivative source.
    pub fn with_mode(&self, mode: DerivativeMode) -> Result<Self> {
        Self::new(self.dynamics.clone(), self.dt, mode)
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics.drift(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.input_matrix(x)
    }

    /// Continuous-time velocity `f(x) + G(x) u`.
    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.drift(x) + self.dynamics.input_matrix(x) * u
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Contract(format!(
                "state has length {}, model expects {}",
                x.len(),
                self.state_dim()
            )));
        }
        if u.len() != self.control_dim() {
            return Err(Error::Contract(format!(
                "control has length {}, model expects {}",
                u.len(),
                self.control_dim()
            )));
        }
        Ok(())
    }

    /// One Euler step: `x + (f(x) + G(x) u) dt + epsilon * w * sqrt(dt)`.
    ///
    /// `w` is the already-scaled disturbance sample (per-coordinate sigma applied).
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
        epsilon: f64,
    ) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        if w.len() != self.state_dim() {
            return Err(Error::Contract(format!(
                "disturbance has length {}, model expects {}",
                w.len(),
                self.state_dim()
            )));
        }
        ensure_finite_vec(x, "state")?;
        ensure_finite_vec(u, "control")?;
        let mut next = x + self.velocity(x, u) * self.dt;
        if epsilon != 0.0 {
            ensure_finite_vec(w, "disturbance")?;
            next += w * (epsilon * self.dt.sqrt());
        }
        ensure_finite_vec(&next, "next state")?;
        Ok(next)
    }

    /// Noise-free step.
    pub fn step_nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        ensure_finite_vec(x, "state")?;
        ensure_finite_vec(u, "control")?;
        let next = x + self.velocity(x, u) * self.dt;
        ensure_finite_vec(&next, "next state")?;
        Ok(next)
    }

    /// First derivatives of `f` and `G` at `x`.
    pub fn first_order(&self, x: &DVector<f64>) -> Result<FirstOrder> {
        let out = match self.mode {
            DerivativeMode::Analytic => FirstOrder {
                fx: self
                    .dynamics
                    .drift_jacobian(x)
                    .ok_or_else(|| Error::Contract("missing analytic drift Jacobian".into()))?,
                gx: self
                    .dynamics
                    .input_jacobian(x)
                    .ok_or_else(|| Error::Contract("missing analytic input Jacobian".into()))?,
            },
            DerivativeMode::FiniteDifference => fd::first_order(self.dynamics.as_ref(), x),
        };
        ensure_finite_mat(&out.fx, "drift Jacobian")?;
        for g in &out.gx {
            ensure_finite_mat(g, "input Jacobian")?;
        }
        Ok(out)
    }

    /// Discrete Jacobians of the Euler map at `(x, u)`:
    /// `A = I + (df/dx + sum_j dG_j/dx u_j) dt`, `B = G(x) dt`.
    pub fn linearize(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        let d = self.first_order(x)?;
        let n = self.state_dim();
        let mut a_cont = d.fx;
        for (i, gxi) in d.gx.iter().enumerate() {
            let col = gxi * u;
            let mut c = a_cont.column_mut(i);
            c += col;
        }
        let a = DMatrix::identity(n, n) + a_cont * self.dt;
        let b = self.input_matrix(x) * self.dt;
        ensure_finite_mat(&b, "input matrix")?;
        Ok((a, b))
    }

    /// Second-derivative tensors of `f` and `G` at `x` (continuous time, not scaled by dt).
    pub fn second_order(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<SecondOrder> {
        self.check_dims(x, u)?;
        let out = match self.mode {
            DerivativeMode::Analytic => SecondOrder {
                fxx: self
                    .dynamics
                    .drift_hessians(x)
                    .ok_or_else(|| Error::Contract("missing analytic drift Hessians".into()))?,
                gxx: self
                    .dynamics
                    .input_hessians(x)
                    .ok_or_else(|| Error::Contract("missing analytic input Hessians".into()))?,
                gx: self
                    .dynamics
                    .input_jacobian(x)
                    .ok_or_else(|| Error::Contract("missing analytic input Jacobian".into()))?,
            },
            DerivativeMode::FiniteDifference => fd::second_order(self.dynamics.as_ref(), x),
        };
        let finite = out.fxx.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && out.gx.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && out
                .gxx
                .iter()
                .all(|row| row.iter().all(|m| m.iter().all(|v| v.is_finite())));
        if !finite {
            return Err(Error::Numeric("second-order tensor is not finite".into()));
        }
        Ok(out)
    }
}

/// Central finite differences of the vector field.
pub mod fd {
    use super::*;

    /// First-derivative step.
    pub fn first_step(xi: f64) -> f64 {
        1e-6 * xi.abs().max(1.0)
    }

    /// Second-derivative step.
    pub fn second_step(xi: f64) -> f64 {
        1e-4 * xi.abs().max(1.0)
    }

    pub fn first_order(dyn_: &dyn Dynamics, x: &DVector<f64>) -> FirstOrder {
        let n = dyn_.state_dim();
        let p = dyn_.control_dim();
        let mut fx = DMatrix::zeros(n, n);
        let mut gx = Vec::with_capacity(n);
        for i in 0..n {
            let h = first_step(x[i]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let span = xp[i] - xm[i];
            fx.set_column(i, &((dyn_.drift(&xp) - dyn_.drift(&xm)) / span));
            let g = (dyn_.input_matrix(&xp) - dyn_.input_matrix(&xm)) / span;
            debug_assert_eq!(g.shape(), (n, p));
            gx.push(g);
        }
        FirstOrder { fx, gx }
    }

    /// Hessian of each component of a vector-valued map, by second-order central stencils.
    pub fn hessians<F>(map: F, x: &DVector<f64>, outputs: usize) -> Vec<DMatrix<f64>>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let n = x.len();
        let mut hs = vec![DMatrix::zeros(n, n); outputs];
        let f0 = map(x);
        for i in 0..n {
            let hi = second_step(x[i]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += hi;
            xm[i] -= hi;
            let fp = map(&xp);
            let fm = map(&xm);
            for k in 0..outputs {
                hs[k][(i, i)] = (fp[k] - 2.0 * f0[k] + fm[k]) / (hi * hi);
            }
            for j in 0..i {
                let hj = second_step(x[j]);
                let eval = |si: f64, sj: f64| {
                    let mut y = x.clone();
                    y[i] += si * hi;
                    y[j] += sj * hj;
                    map(&y)
                };
                let fpp = eval(1.0, 1.0);
                let fpm = eval(1.0, -1.0);
                let fmp = eval(-1.0, 1.0);
                let fmm = eval(-1.0, -1.0);
                for k in 0..outputs {
                    let v = (fpp[k] - fpm[k] - fmp[k] + fmm[k]) / (4.0 * hi * hj);
                    hs[k][(i, j)] = v;
                    hs[k][(j, i)] = v;
                }
            }
        }
        hs
    }

    pub fn second_order(dyn_: &dyn Dynamics, x: &DVector<f64>) -> SecondOrder {
        let n = dyn_.state_dim();
        let p = dyn_.control_dim();
        let fxx = hessians(|y| dyn_.drift(y), x, n);
        let gxx = (0..p)
            .map(|j| hessians(|y| dyn_.input_matrix(y).column(j).into_owned(), x, n))
            .collect();
        let gx = first_order(dyn_, x).gx;
        SecondOrder { fxx, gxx, gx }
    }
}
