//! Experiment configuration: TOML text with fixed sections (see README).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nearopt_core::grid_dp::{Expectation, GridSpec, Interpolation};
use nearopt_core::{build_model, ControlAffineModel, ControllerKind, ControllerSpec, ModelParams, SigmaRule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub cost: CostSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub noise: NoiseSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub controllers: Vec<ControllerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub expectation: Expectation,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default)]
    pub checks: ChecksSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Declared wall-clock budget in seconds (informational).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_budget_s: Option<f64>,
}

fn default_runs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub dt: f64,
    #[serde(default)]
    pub params: ModelParams,
}

/// Diagonals of `Q`, `R`, `Q_T` and the target state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_terminal: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub x0: Vec<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub sigma: SigmaRule,
    #[serde(default)]
    pub independent_streams: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub boundary_penalty: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_open_loop: Option<DpOpenLoopCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_fit: Option<ExpansionCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma1: Option<Lemma1Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closeness: Option<ClosenessCheck>,
}

impl ChecksSection {
    pub fn any(&self) -> bool {
        self.dp_open_loop.is_some() || self.expansion_fit.is_some() || self.lemma1.is_some() || self.closeness.is_some()
    }
}

/// Deterministic grid DP at `x0` against the open-loop optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpOpenLoopCheck {
    pub tolerance: f64,
}

/// Series fit of one controller's sweep; `J0` must match the nominal cost and
/// the cubic coefficient must vanish, both within `max_z` standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionCheck {
    pub controller: String,
    #[serde(default = "two")]
    pub max_z: f64,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma1Check {
    pub epsilons: Vec<f64>,
    pub n_runs: usize,
    pub slope_min: f64,
    pub slope_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosenessCheck {
    pub epsilons: Vec<f64>,
    /// Grid for this check; defaults to `[grid]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "ten")]
    pub floor_factor: f64,
    pub min_slope: f64,
}

fn ten() -> f64 {
    10.0
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn build_model(&self) -> Result<ControlAffineModel, CliError> {
        build_model(&self.model.name, &self.model.params, self.model.dt).map_err(|e| CliError::Validation(vec![format!("model: {e}")]))
    }

    fn uses_grid_controller(&self) -> bool {
        self.controllers.iter().any(|c| c.kind == ControllerKind::GridDpPolicy)
    }

    /// Every semantic problem at once, each prefixed with its field path.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if self.experiment.n_runs == 0 {
            errs.push("experiment.n_runs: must be >= 1".to_string());
        }
        if !(self.model.dt > 0.0 && self.model.dt.is_finite()) {
            errs.push("model.dt: must be positive".into());
        }
        let model = build_model(&self.model.name, &self.model.params, self.model.dt.max(1e-300));
        let dims = match &model {
            Ok(m) => Some((m.state_dim(), m.control_dim())),
            Err(e) => {
                errs.push(format!("model.name: {e} (see `list-models`)"));
                None
            }
        };
        if let Some((n, p)) = dims {
            for (field, v, len) in [
                ("cost.q", &self.cost.q, n),
                ("cost.r", &self.cost.r, p),
                ("cost.q_terminal", &self.cost.q_terminal, n),
                ("cost.target", &self.cost.target, n),
                ("problem.x0", &self.problem.x0, n),
            ] {
                if v.len() != len {
                    errs.push(format!("{field}: expected {len} entries, found {}", v.len()));
                }
            }
            if let Err(e) = self.noise.sigma.validate(n) {
                errs.push(format!("noise.sigma: {e}"));
            }
            if (self.grid.is_some() || self.uses_grid_controller() || self.checks.closeness.is_some()) && n != 1 {
                errs.push("grid: grid DP requires a 1-D model".into());
            }
        }
        if self.cost.r.iter().any(|r| !(*r > 0.0)) {
            errs.push("cost.r: entries must be positive".into());
        }
        for (field, v) in [("cost.q", &self.cost.q), ("cost.q_terminal", &self.cost.q_terminal)] {
            if v.iter().any(|x| !(*x >= 0.0)) {
                errs.push(format!("{field}: entries must be >= 0"));
            }
        }
        if self.problem.horizon == 0 {
            errs.push("problem.horizon: must be >= 1".into());
        }
        let eps = &self.sweep.epsilons;
        if eps.is_empty() {
            errs.push("sweep.epsilons: must not be empty".into());
        } else if eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            errs.push("sweep.epsilons: entries must be finite and >= 0".into());
        } else if eps.windows(2).any(|w| !(w[0] < w[1])) {
            errs.push("sweep.epsilons: must be strictly ascending".into());
        }
        if self.controllers.is_empty() {
            errs.push("controllers: must not be empty".into());
        }
        let mut labels = BTreeSet::new();
        for (i, c) in self.controllers.iter().enumerate() {
            if let Err(e) = c.validate() {
                errs.push(format!("controllers[{i}]: {e}"));
            }
            if !labels.insert(c.label()) {
                errs.push(format!("controllers[{i}].label: duplicate label `{}`", c.label()));
            }
        }
        match (&self.grid, self.uses_grid_controller()) {
            (None, true) => errs.push("grid: required by grid_dp_policy controllers".into()),
            (Some(_), false) if self.checks.dp_open_loop.is_none() && self.checks.closeness.is_none() => {
                errs.push("grid: given but no controller or check uses it".into())
            }
            _ => {}
        }
        if let Some(g) = &self.grid {
            if let Err(e) = g.validate() {
                errs.push(format!("grid: {e}"));
            }
        }
        if let Err(e) = self.expectation.validate() {
            errs.push(format!("expectation: {e}"));
        }
        if !(self.dp.boundary_penalty >= 0.0 && self.dp.boundary_penalty.is_finite()) {
            errs.push("dp.boundary_penalty: must be finite and >= 0".into());
        }
        self.validate_checks(&labels, &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errs))
        }
    }

    fn validate_checks(&self, labels: &BTreeSet<String>, errs: &mut Vec<String>) {
        let c = &self.checks;
        if let Some(d) = &c.dp_open_loop {
            if self.grid.is_none() {
                errs.push("checks.dp_open_loop: needs [grid]".into());
            }
            if !(d.tolerance > 0.0) {
                errs.push("checks.dp_open_loop.tolerance: must be positive".into());
            }
        }
        if let Some(x) = &c.expansion_fit {
            if !labels.contains(&x.controller) {
                errs.push(format!("checks.expansion_fit.controller: no controller labelled `{}`", x.controller));
            }
            if self.sweep.epsilons.len() < 5 {
                errs.push("checks.expansion_fit: needs at least 5 sweep epsilons".into());
            }
        }
        if let Some(l) = &c.lemma1 {
            let mut distinct: Vec<f64> = l.epsilons.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() < 3 || distinct.iter().any(|e| !(*e > 0.0)) {
                errs.push("checks.lemma1.epsilons: need at least 3 distinct positive values".into());
            }
            if l.n_runs == 0 {
                errs.push("checks.lemma1.n_runs: must be >= 1".into());
            }
            if !(l.slope_min < l.slope_max) {
                errs.push("checks.lemma1: slope_min must be below slope_max".into());
            }
        }
        if let Some(k) = &c.closeness {
            if !matches!(self.expectation, Expectation::Quadrature { .. }) {
                errs.push("checks.closeness: requires expectation.mode = \"quadrature\"".into());
            }
            if k.grid.is_none() && self.grid.is_none() {
                errs.push("checks.closeness.grid: needs a grid here or in [grid]".into());
            }
            if let Some(g) = &k.grid {
                if let Err(e) = g.validate() {
                    errs.push(format!("checks.closeness.grid: {e}"));
                }
            }
            if k.epsilons.len() < 3 || k.epsilons.iter().any(|e| !(*e > 0.0)) {
                errs.push("checks.closeness.epsilons: need at least 3 positive values".into());
            }
        }
    }
}
