//! Stage and terminal costs.
//!
//! The running cost is `(l(x) + 1/2 u' R u) dt`; the terminal cost is `c_T(x)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait CostModel: Send + Sync {
    /// State part of the running cost, `l(x)` (per unit time).
    fn state_cost(&self, x: &DVector<f64>) -> f64;
    fn state_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn state_hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Control penalty `R` (per unit time), symmetric positive definite.
    fn control_weight(&self) -> &DMatrix<f64>;

    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn terminal_hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Full running cost over one step, `(l(x) + 1/2 u'Ru) dt`.
    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> f64 {
        let r = self.control_weight();
        (self.state_cost(x) + 0.5 * u.dot(&(r * u))) * dt
    }
}

/// Quadratic tracking cost about a target state:
/// `l(x) = 1/2 (x - x*)' Q (x - x*)`, `c_T(x) = 1/2 (x - x*)' Q_T (x - x*)`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    q_terminal: DMatrix<f64>,
    target: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_terminal: DMatrix<f64>,
        target: DVector<f64>,
    ) -> Result<Self> {
        let n = target.len();
        if q.shape() != (n, n) || q_terminal.shape() != (n, n) {
            return Err(Error::Contract(format!(
                "Q and Q_T must be {n}x{n}, got {:?} and {:?}",
                q.shape(),
                q_terminal.shape()
            )));
        }
        if !r.is_square() || r.nrows() == 0 {
            return Err(Error::Contract("R must be square and non-empty".into()));
        }
        for (name, m) in [("Q", &q), ("R", &r), ("Q_T", &q_terminal)] {
            if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
                return Err(Error::Contract(format!("{name} must be symmetric")));
            }
        }
        if r.clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::Contract("R must be positive definite".into()));
        }
        Ok(Self {
            q,
            r,
            q_terminal,
            target,
        })
    }

    /// Diagonal weights.
    pub fn diagonal(q: &[f64], r: &[f64], q_terminal: &[f64], target: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            DMatrix::from_diagonal(&DVector::from_column_slice(r)),
            DMatrix::from_diagonal(&DVector::from_column_slice(q_terminal)),
            DVector::from_column_slice(target),
        )
    }

    /// Every weight multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if factor <= 0.0 {
            return Err(Error::Contract("cost scale must be positive".into()));
        }
        Self::new(
            &self.q * factor,
            &self.r * factor,
            &self.q_terminal * factor,
            self.target.clone(),
        )
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn q_terminal(&self) -> &DMatrix<f64> {
        &self.q_terminal
    }
}

impl CostModel for QuadraticCost {
    fn state_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.target;
        0.5 * e.dot(&(&self.q * &e))
    }
    fn state_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * (x - &self.target)
    }
    fn state_hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
    fn control_weight(&self) -> &DMatrix<f64> {
        &self.r
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.target;
        0.5 * e.dot(&(&self.q_terminal * &e))
    }
    fn terminal_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q_terminal * (x - &self.target)
    }
    fn terminal_hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q_terminal.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn rejects_indefinite_r() {
        let err = QuadraticCost::diagonal(&[1.0], &[0.0], &[1.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(QuadraticCost::diagonal(&[1.0], &[-1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn rejects_asymmetric_weights() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let r = DMatrix::identity(1, 1);
        assert!(QuadraticCost::new(q.clone(), r, q, DVector::zeros(2)).is_err());
    }

    #[test]
    fn stage_cost_scales_with_dt() {
        let c = QuadraticCost::diagonal(&[2.0], &[4.0], &[1.0], &[1.0]).unwrap();
        let x = DVector::from_element(1, 3.0);
        let u = DVector::from_element(1, 0.5);
        // (1/2*2*4 + 1/2*4*0.25) * 0.1
        assert!((c.stage_cost(&x, &u, 0.1) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn terminal_derivatives_match_finite_differences() {
        let q_t = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let c = QuadraticCost::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(1, 1),
            q_t,
            DVector::from_vec(vec![0.3, -1.0, 2.0]),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.1, 0.4, -0.7]);
        let g = fd_gradient(|y| c.terminal_cost(y), &x);
        let rel = (&g - c.terminal_gradient(&x)).norm() / g.norm();
        assert!(rel < 1e-5, "rel {rel}");
        for i in 0..3 {
            let hcol = fd_gradient(|y| c.terminal_gradient(y)[i], &x);
            let rel = (&hcol - c.terminal_hessian(&x).row(i).transpose()).norm() / hcol.norm();
            assert!(rel < 1e-5);
        }
    }
}
