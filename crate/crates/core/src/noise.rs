//! Process-noise configuration and counter-based Gaussian sampling.
//!
//! Every disturbance sample is addressed by a key `(seed, stream, run, t)`; the
//! same key yields the same vector regardless of evaluation order or thread.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ControlAffineModel;
use crate::rollout::Trajectory;

/// Domain tags keep disturbance paths and grid-DP expectation samples independent.
pub(crate) const TAG_ROLLOUT: u64 = 0x524f_4c4c;
pub(crate) const TAG_GRID: u64 = 0x4752_4944;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// `len` independent standard normals addressed by `key`.
pub fn standard_normals(key: &[u64], len: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(key));
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(&mut rng)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub epsilon: f64,
    /// Per-coordinate standard deviation of the unscaled disturbance.
    pub base_sigma: DVector<f64>,
    pub seed: u64,
    /// Stream selector; controllers compared on common random numbers share a stream.
    pub stream: u64,
}

impl NoiseConfig {
    pub fn new(epsilon: f64, base_sigma: DVector<f64>, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Contract(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if base_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Contract("base_sigma entries must be finite and >= 0".into()));
        }
        Ok(Self {
            epsilon,
            base_sigma,
            seed,
            stream: 0,
        })
    }

    pub fn noiseless(n: usize) -> Self {
        Self {
            epsilon: 0.0,
            base_sigma: DVector::zeros(n),
            seed: 0,
            stream: 0,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_stream(&self, stream: u64) -> Self {
        Self {
            stream,
            ..self.clone()
        }
    }

    /// Pre-scaled disturbance `sigma .* z` for run `run` at step `t`.
    ///
    /// Exactly zero when `epsilon == 0`. The sample does not depend on epsilon, so
    /// sweeping epsilon rescales one fixed path.
    pub fn disturbance(&self, run: u64, t: usize) -> DVector<f64> {
        let n = self.base_sigma.len();
        if self.epsilon == 0.0 {
            return DVector::zeros(n);
        }
        standard_normals(&[TAG_ROLLOUT, self.seed, self.stream, run, t as u64], n)
            .component_mul(&self.base_sigma)
    }
}

/// How the per-coordinate noise scale is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaRule {
    /// The string `"u_avg"`.
    Named(String),
    Fixed(Vec<f64>),
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule::Named("u_avg".into())
    }
}

impl SigmaRule {
    pub fn validate(&self, n: usize) -> std::result::Result<(), String> {
        match self {
            SigmaRule::Named(s) if s == "u_avg" => Ok(()),
            SigmaRule::Named(s) => Err(format!("unknown sigma rule `{s}` (expected \"u_avg\" or a list)")),
            SigmaRule::Fixed(v) if v.len() != n => {
                Err(format!("fixed sigma has {} entries, state dimension is {n}", v.len()))
            }
            SigmaRule::Fixed(v) if v.iter().any(|s| !(s.is_finite() && *s >= 0.0)) => {
                Err("fixed sigma entries must be finite and >= 0".into())
            }
            SigmaRule::Fixed(_) => Ok(()),
        }
    }

    pub fn resolve(&self, model: &ControlAffineModel, nominal: &Trajectory) -> Result<DVector<f64>> {
        self.validate(model.state_dim()).map_err(Error::Contract)?;
        match self {
            SigmaRule::Fixed(v) => Ok(DVector::from_column_slice(v)),
            SigmaRule::Named(_) => Ok(u_avg_sigma(model, nominal)),
        }
    }
}

/// Noise scale from the mean absolute nominal control.
///
/// Per input `j`, `ubar_j = mean_t |u_j,t|`; coordinate `i` gets
/// `sigma_i = mean_t sum_j |G_ij(x_t)| ubar_j`. For a scalar system with unit input
/// gain this is just the time-averaged absolute control.
pub fn u_avg_sigma(model: &ControlAffineModel, nominal: &Trajectory) -> DVector<f64> {
    let n = model.state_dim();
    let p = model.control_dim();
    let horizon = nominal.controls.len();
    if horizon == 0 {
        return DVector::zeros(n);
    }
    let mut ubar = DVector::zeros(p);
    for u in &nominal.controls {
        ubar += u.abs();
    }
    ubar /= horizon as f64;
    let mut sigma = DVector::zeros(n);
    for x in &nominal.states[..horizon] {
        sigma += model.input_matrix(x).abs() * &ubar;
    }
    sigma / horizon as f64
}
