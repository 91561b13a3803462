use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::BilevelProblem;
use crate::mdp_env::Squash;
use crate::penalty_algo::{PenaltyConfig, ScheduleConstants};
use crate::preference::LabelMode;
use crate::synthetic_bilevel::InstanceKind;

/// Version of the configuration schema this build accepts.
pub const SCHEMA_VERSION: u32 = 1;

/// Experiment selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Brl,
    Standard,
    Lemma1,
    Gradcheck,
    Sweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Brl => "brl",
            ExperimentKind::Standard => "standard",
            ExperimentKind::Lemma1 => "lemma1",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

/// A complete run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Target accuracy; when set, σ, B, n, T, K, H come from the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<PenaltyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConstants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brl: Option<BrlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard: Option<StandardConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma1: Option<Lemma1Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

/// Starting iterates. Missing vectors default to zeros; `lambda_prime0`
/// defaults to `lambda0`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_prime0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// `chain-K` with binary-logit softmax policy and one-hot reward features.
    Chain,
    /// Scalar linear-quadratic system with a Gaussian policy.
    Lq1d,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairModeKind {
    #[default]
    Fresh,
    Buffer,
}

fn default_states() -> usize {
    2
}
fn default_slip() -> f64 {
    0.1
}
fn default_pref_horizon() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_label_mode() -> LabelMode {
    LabelMode::Bernoulli
}
fn default_squash() -> Squash {
    Squash::Logistic
}
fn default_policy_std() -> f64 {
    0.5
}
fn default_action_bound() -> f64 {
    2.0
}

/// The bilevel RL instance. γ and β are taken from the solver section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrlConfig {
    pub env: EnvKind,
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_slip")]
    pub slip: f64,
    #[serde(default)]
    pub policy_floor: f64,
    #[serde(default = "default_policy_std")]
    pub policy_std: f64,
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_bound: Option<f64>,
    #[serde(default = "default_pref_horizon")]
    pub pref_horizon: usize,
    #[serde(default)]
    pub pair_mode: PairModeKind,
    /// Pairs appended per outer iteration in buffer mode.
    #[serde(default)]
    pub refresh_count: usize,
    /// Pairs drawn from the reference policy to seed the buffer.
    #[serde(default)]
    pub initial_pairs: usize,
    #[serde(default = "default_one")]
    pub q_rollouts: usize,
    #[serde(default = "default_label_mode")]
    pub label_mode: LabelMode,
    #[serde(default = "default_squash")]
    pub squash: Squash,
    /// Parameters of the hidden reward used by the labeler.
    pub true_phi: Vec<f64>,
    /// Held-out pairs (from the reference policy) for the final accuracy.
    #[serde(default)]
    pub heldout_pairs: usize,
}

/// Synthetic instance of the standard regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardConfig {
    pub instance: InstanceKind,
    #[serde(default)]
    pub noise_g: f64,
    #[serde(default)]
    pub noise_j: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaFunction {
    Quadratic,
    Sinsq,
}

fn default_seeds() -> usize {
    100
}
fn default_slack() -> f64 {
    1.05
}
fn default_grid_lo() -> f64 {
    -10.0
}
fn default_grid_hi() -> f64 {
    10.0
}
fn default_grid_step() -> f64 {
    1e-4
}

/// Biased SGD certification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma1Config {
    pub function: LemmaFunction,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise: f64,
    /// Declared β; defaults to `bias² + noise²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub eta: f64,
    pub steps: usize,
    pub x0: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
    /// PL constant; measured on the grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "default_grid_lo")]
    pub grid_lo: f64,
    #[serde(default = "default_grid_hi")]
    pub grid_hi: f64,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
}

fn default_points() -> usize {
    20
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_corrupt_factor() -> f64 {
    1.1
}

/// Gradient-versus-finite-difference checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Subset of registered objectives; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectives: Option<Vec<String>>,
    /// Objective whose analytic gradient is scaled by `corrupt_factor`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<String>,
    #[serde(default = "default_corrupt_factor")]
    pub corrupt_factor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: default_points(),
            tolerance: default_tolerance(),
            objectives: None,
            corrupt: None,
            corrupt_factor: default_corrupt_factor(),
        }
    }
}

/// Cartesian sweep over solver settings. Each listed axis overrides the
/// resolved solver configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<usize>>,
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// First line assigning `key` (as `key = ...`), if any.
fn locate_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn config_error(text: &str, key: &str, message: impl Into<String>) -> Error {
    Error::Config { line: locate_key(text, key), message: message.into() }
}

impl RunConfig {
    /// Parses and validates a configuration file's contents.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate_with(text)?;
        Ok(cfg)
    }

    /// Checks cross-field constraints. Errors point at the offending key.
    pub fn validate(&self) -> Result<()> {
        self.validate_with("")
    }

    fn validate_with(&self, text: &str) -> Result<()> {
        let err = |key: &str, msg: String| config_error(text, key, msg);
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(err("seed", "seed must fit in a signed 64-bit integer".into()));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(err("epsilon", format!("epsilon must lie in (0, 1], got {eps}")));
            }
        }
        let needs_solver = matches!(self.experiment, ExperimentKind::Brl | ExperimentKind::Standard | ExperimentKind::Sweep);
        if needs_solver {
            let solver = self.solver.as_ref().ok_or_else(|| err("experiment", "missing [solver] section".into()))?;
            if self.epsilon.is_none() {
                solver.validate().map_err(|e| Error::Config { line: locate_section(text, "solver"), message: e.to_string() })?;
            }
        }
        match self.experiment {
            ExperimentKind::Brl => self.validate_brl(text)?,
            ExperimentKind::Standard => {
                self.standard.as_ref().ok_or_else(|| err("experiment", "missing [standard] section".into()))?;
                self.validate_standard(text)?;
            }
            ExperimentKind::Lemma1 => {
                let l = self.lemma1.as_ref().ok_or_else(|| err("experiment", "missing [lemma1] section".into()))?;
                let smooth_l = super::lemma_function(l.function).smooth_l();
                if !(l.eta > 0.0 && l.eta <= 1.0 / smooth_l) {
                    return Err(err("eta", format!("eta must lie in (0, 1/L] = (0, {}], got {}", 1.0 / smooth_l, l.eta)));
                }
                if let Some(mu) = l.mu {
                    if !(mu > 0.0) {
                        return Err(err("mu", format!("mu must be positive, got {mu}")));
                    }
                }
                if l.steps == 0 || l.seeds == 0 {
                    return Err(err("steps", "steps and seeds must be at least 1".into()));
                }
                if !(l.bias.is_finite() && l.noise >= 0.0 && l.noise.is_finite()) {
                    return Err(err("noise", "bias must be finite and noise non-negative".into()));
                }
                if !(l.slack >= 1.0) {
                    return Err(err("slack", format!("slack must be at least 1, got {}", l.slack)));
                }
                if !(l.grid_step > 0.0 && l.grid_lo < l.grid_hi) {
                    return Err(err("grid_step", "grid needs a positive step and grid_lo < grid_hi".into()));
                }
            }
            ExperimentKind::Gradcheck => {
                let g = self.gradcheck.clone().unwrap_or_default();
                if g.points == 0 || !(g.tolerance > 0.0) {
                    return Err(err("points", "points must be at least 1 and tolerance positive".into()));
                }
                let known = |n: &str| super::OBJECTIVES.contains(&n);
                if let Some(unknown) = g.objectives.iter().flatten().find(|n| !known(n)) {
                    return Err(err("objectives", format!("unknown objective `{unknown}`")));
                }
                if let Some(c) = g.corrupt.as_deref().filter(|c| !known(c)) {
                    return Err(err("corrupt", format!("unknown objective `{c}`")));
                }
            }
            ExperimentKind::Sweep => {
                let s = self.sweep.as_ref().ok_or_else(|| err("experiment", "missing [sweep] section".into()))?;
                match s.kind {
                    ExperimentKind::Brl => self.validate_brl(text)?,
                    ExperimentKind::Standard => {
                        self.standard.as_ref().ok_or_else(|| err("kind", "missing [standard] section".into()))?;
                        self.validate_standard(text)?;
                    }
                    other => return Err(err("kind", format!("cannot sweep `{}` experiments", other.name()))),
                }
                let axes = [
                    s.sigma.as_ref().map(Vec::len),
                    s.b.as_ref().map(Vec::len),
                    s.k.as_ref().map(Vec::len),
                    s.h.as_ref().map(Vec::len),
                    s.t.as_ref().map(Vec::len),
                ];
                if axes.iter().any(|a| *a == Some(0)) || axes.iter().all(Option::is_none) {
                    return Err(err("kind", "a sweep needs at least one non-empty axis".into()));
                }
                for child in super::sweep_children(self)? {
                    child.validate_with(text)?;
                }
            }
        }
        Ok(())
    }

    fn validate_brl(&self, text: &str) -> Result<()> {
        let err = |key: &str, msg: String| config_error(text, key, msg);
        let b = self.brl.as_ref().ok_or_else(|| err("experiment", "missing [brl] section".into()))?;
        if b.env == EnvKind::Chain && b.states == 0 {
            return Err(err("states", "chain needs at least one state".into()));
        }
        if b.pref_horizon == 0 || b.q_rollouts == 0 {
            return Err(err("pref_horizon", "pref_horizon and q_rollouts must be at least 1".into()));
        }
        if b.pair_mode == PairModeKind::Buffer && b.initial_pairs == 0 && b.refresh_count == 0 {
            return Err(err("pair_mode", "buffer mode needs initial_pairs or refresh_count".into()));
        }
        if let Some(bound) = b.lambda_bound {
            if !(bound > 0.0) {
                return Err(err("lambda_bound", format!("lambda_bound must be positive, got {bound}")));
            }
        }
        let solver = self.resolved_solver().map_err(|e| Error::Config { line: locate_section(text, "solver"), message: e.to_string() })?;
        let problem = super::build_brl_problem(b, &solver, self.seed, None)
            .map_err(|e| Error::Config { line: locate_section(text, "brl"), message: e.to_string() })?;
        self.validate_init(text, problem.phi_dim(), problem.lambda_dim())
    }

    fn validate_init(&self, text: &str, phi_dim: usize, lambda_dim: usize) -> Result<()> {
        super::init_vectors(self, phi_dim, lambda_dim)
            .map(|_| ())
            .map_err(|e| Error::Config { line: locate_section(text, "init"), message: e.to_string() })
    }

    fn validate_standard(&self, text: &str) -> Result<()> {
        let s = self.standard.as_ref().expect("checked by caller");
        if !(s.noise_g >= 0.0 && s.noise_j >= 0.0 && s.noise_g.is_finite() && s.noise_j.is_finite()) {
            return Err(config_error(text, "noise_g", "noise levels must be non-negative"));
        }
        self.validate_init(text, 1, 1)
    }

    /// The solver section after applying the ε-schedule (if any).
    pub fn resolved_solver(&self) -> Result<PenaltyConfig> {
        let base = self.solver.clone().ok_or_else(|| Error::invalid("missing [solver] section"))?;
        match self.epsilon {
            Some(eps) => {
                let regime = match self.experiment_for_solver() {
                    ExperimentKind::Standard => crate::problem::Regime::Standard,
                    _ => crate::problem::Regime::Brl,
                };
                let constants = self.schedule.unwrap_or_default();
                Ok(crate::penalty_algo::schedule_from_epsilon(eps, regime, &constants, &base)?.config)
            }
            None => Ok(base),
        }
    }

    fn experiment_for_solver(&self) -> ExperimentKind {
        match (self.experiment, &self.sweep) {
            (ExperimentKind::Sweep, Some(s)) => s.kind,
            (k, _) => k,
        }
    }

    /// Canonical TOML form; re-parses to an identical configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize configuration: {e}")))
    }
}

/// Line of a `[section]` header, if any.
fn locate_section(text: &str, section: &str) -> Option<usize> {
    let header = format!("[{section}]");
    text.lines().position(|l| l.trim() == header).map(|i| i + 1)
}
