use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke a documented precondition (dimensions, ranges, feasibility).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where a finite value was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The gain recursion lost positive definiteness of the control Hessian.
    #[error("control Hessian not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },

    /// Singular input gain in a 1-D control inversion.
    #[error("singular input gain {gain:e} at x = {x}")]
    SingularInput { x: f64, gain: f64 },

    /// A closed-loop simulation failed at a specific step.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::AtStep { .. } => self,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub(crate) fn ensure_finite_vec(v: &nalgebra::DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}

pub(crate) fn ensure_finite_mat(m: &nalgebra::DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}
