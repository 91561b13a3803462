//! Scalar bilevel instances with PL lower levels and Gaussian gradient oracles.
//!
//! Both instances share the upper objective `G(φ, λ) = (φ−1)² + (λ−1)²`. The
//! lower objectives depend on `u = λ − φ` only:
//!
//! - `quad`:  `J = −u²`
//! - `sinsq`: `J = −(u² + 3 sin² u)`, non-concave but PL for maximization
//!
//! so `λ*(φ) = φ` and `Φ(φ) = 2(φ−1)²` in both cases.

use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::penalty_algo::{run_algorithm1, schedule_from_epsilon, PenaltyConfig, RunRecord, Schedule, ScheduleConstants};
use crate::pl_sgd_lab::{measure_pl_constant, DomainBox, PlFunction, PlMeasurement};
use crate::problem::{BilevelProblem, GradTarget, OracleBudget, Regime};
use crate::rng::RngStream;

/// Instance selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Quad,
    Sinsq,
}

impl InstanceKind {
    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Quad => "quad",
            InstanceKind::Sinsq => "sinsq",
        }
    }
}

/// Half-width of the λ window used by the grid oracles.
pub const GRID_RADIUS: f64 = 10.0;
/// Spacing of the grid oracles.
pub const GRID_STEP: f64 = 1e-4;

/// A scalar bilevel instance with noisy gradient oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticProblem {
    kind: InstanceKind,
    noise_g: f64,
    noise_j: f64,
    pl: PlMeasurement,
    smooth_l: f64,
}

/// Builds `quad` or `sinsq` with noiseless oracles and a measured PL constant.
pub fn make_pl_instance(name: &str) -> Result<SyntheticProblem> {
    let kind = match name {
        "quad" => InstanceKind::Quad,
        "sinsq" => InstanceKind::Sinsq,
        other => return Err(Error::invalid(format!("unknown synthetic instance `{other}`"))),
    };
    SyntheticProblem::new(kind)
}

impl SyntheticProblem {
    pub fn new(kind: InstanceKind) -> Result<Self> {
        let profile = match kind {
            InstanceKind::Quad => PlFunction::quadratic(),
            InstanceKind::Sinsq => PlFunction::sinsq(),
        };
        let pl = measure_pl_constant(&profile, &DomainBox::interval(-GRID_RADIUS, GRID_RADIUS)?, GRID_STEP)?;
        Ok(SyntheticProblem { kind, noise_g: 0.0, noise_j: 0.0, pl, smooth_l: profile.smooth_l() })
    }

    /// Sets the oracle noise standard deviations `σ_G` and `σ_J`.
    pub fn with_noise(mut self, noise_g: f64, noise_j: f64) -> Result<Self> {
        if !(noise_g >= 0.0 && noise_g.is_finite() && noise_j >= 0.0 && noise_j.is_finite()) {
            return Err(Error::invalid("noise levels must be non-negative and finite"));
        }
        self.noise_g = noise_g;
        self.noise_j = noise_j;
        Ok(self)
    }

    pub fn kind(&self) -> InstanceKind {
        self.kind
    }

    pub fn noise_g(&self) -> f64 {
        self.noise_g
    }

    pub fn noise_j(&self) -> f64 {
        self.noise_j
    }

    /// μ of `‖∇λJ‖² ≥ 2μ(J* − J)`.
    pub fn pl_mu(&self) -> f64 {
        self.pl.mu
    }

    /// The raw grid measurement behind [`SyntheticProblem::pl_mu`].
    pub fn pl_measurement(&self) -> &PlMeasurement {
        &self.pl
    }

    /// Smoothness constant of `J` in λ.
    pub fn smooth_l(&self) -> f64 {
        self.smooth_l
    }

    pub fn g(&self, phi: f64, lambda: f64) -> f64 {
        (phi - 1.0).powi(2) + (lambda - 1.0).powi(2)
    }

    pub fn j(&self, phi: f64, lambda: f64) -> f64 {
        let u = lambda - phi;
        match self.kind {
            InstanceKind::Quad => -u * u,
            InstanceKind::Sinsq => -(u * u + 3.0 * u.sin().powi(2)),
        }
    }

    /// Exact partial derivative.
    pub fn grad(&self, target: GradTarget, phi: f64, lambda: f64) -> f64 {
        let u = lambda - phi;
        // dJ/du
        let dj = match self.kind {
            InstanceKind::Quad => -2.0 * u,
            InstanceKind::Sinsq => -(2.0 * u + 3.0 * (2.0 * u).sin()),
        };
        match target {
            GradTarget::PhiG => 2.0 * (phi - 1.0),
            GradTarget::LambdaG => 2.0 * (lambda - 1.0),
            GradTarget::PhiJ => -dj,
            GradTarget::LambdaJ => dj,
        }
    }

    fn noise_for(&self, target: GradTarget) -> f64 {
        match target {
            GradTarget::PhiG | GradTarget::LambdaG => self.noise_g,
            GradTarget::PhiJ | GradTarget::LambdaJ => self.noise_j,
        }
    }

    /// `λ*(φ)` located by grid search over `[φ − 10, φ + 10]`.
    pub fn lambda_star(&self, phi: f64) -> f64 {
        grid_argmax(|l| self.j(phi, l), phi - GRID_RADIUS, phi + GRID_RADIUS, GRID_STEP)
    }

    /// `λ*_σ(φ) = argmax_λ J − σG`, located by grid search around `λ*(φ)`.
    pub fn lambda_star_sigma(&self, phi: f64, sigma: f64) -> f64 {
        let c = self.lambda_star(phi);
        grid_argmax(|l| self.j(phi, l) - sigma * self.g(phi, l), c - GRID_RADIUS, c + GRID_RADIUS, GRID_STEP)
    }

    /// `Φ(φ) = G(φ, λ*(φ))`.
    pub fn hyper_objective(&self, phi: f64) -> f64 {
        self.g(phi, self.lambda_star(phi))
    }

    /// `∇Φ(φ)`: `4(φ−1)` for `quad`, central differences of the grid `Φ`
    /// for `sinsq`.
    pub fn hyper_grad(&self, phi: f64) -> f64 {
        match self.kind {
            InstanceKind::Quad => 4.0 * (phi - 1.0),
            InstanceKind::Sinsq => {
                let h = 1e-4;
                (self.hyper_objective(phi + h) - self.hyper_objective(phi - h)) / (2.0 * h)
            }
        }
    }

    /// Grid-measured PL constant of `h_σ = J − σG` in λ at φ, in the same
    /// convention as [`SyntheticProblem::pl_mu`].
    pub fn penalized_pl_mu(&self, phi: f64, sigma: f64) -> Result<f64> {
        let center = self.lambda_star_sigma(phi, sigma);
        let h_star = self.j(phi, center) - sigma * self.g(phi, center);
        let me = self.clone();
        let me2 = self.clone();
        let neg_h = PlFunction::new(
            "neg_h_sigma",
            1,
            move |x| -(me.j(phi, x[0]) - sigma * me.g(phi, x[0])),
            move |x| vec![-(me2.grad(GradTarget::LambdaJ, phi, x[0]) - sigma * me2.grad(GradTarget::LambdaG, phi, x[0]))],
            -h_star,
            self.smooth_l + 2.0 * sigma,
        )?;
        let domain = DomainBox::interval(center - GRID_RADIUS, center + GRID_RADIUS)?;
        Ok(measure_pl_constant(&neg_h, &domain, 1e-3)?.mu)
    }
}

/// Grid argmax of `f` on `[lo, hi]` followed by golden-section refinement
/// within one grid cell on each side.
pub(crate) fn grid_argmax(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, lo);
    for i in 0..=n {
        let x = lo + i as f64 * step;
        let v = f(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    let (mut a, mut b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let x = 0.5 * (a + b);
    if f(x) >= best.0 {
        x
    } else {
        best.1
    }
}

/// Average of `b` independent oracle draws `∇ + σξ_j`.
pub fn noisy_grad(
    problem: &SyntheticProblem,
    target: GradTarget,
    phi: f64,
    lambda: f64,
    b: usize,
    rng: &RngStream,
) -> Result<f64> {
    if b == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let exact = problem.grad(target, phi, lambda);
    let std = problem.noise_for(target);
    if std == 0.0 {
        return Ok(exact);
    }
    let mut r = rng.restart();
    let mut sum = 0.0;
    for _ in 0..b {
        let z: f64 = StandardNormal.sample(&mut r);
        sum += exact + std * z;
    }
    Ok(sum / b as f64)
}

/// Oracle that averages a fixed number of independent draws.
#[derive(Clone, Copy, Debug)]
pub struct BatchedOracle<'a> {
    pub problem: &'a SyntheticProblem,
    pub batch: usize,
}

impl BatchedOracle<'_> {
    pub fn sample(&self, target: GradTarget, phi: f64, lambda: f64, rng: &RngStream) -> Result<f64> {
        noisy_grad(self.problem, target, phi, lambda, self.batch, rng)
    }
}

fn scalar(x: &ParamVec, expected: usize) -> Result<f64> {
    if x.dim() != expected {
        return Err(Error::DimensionMismatch { expected, got: x.dim() });
    }
    Ok(x.get(0))
}

impl BilevelProblem for SyntheticProblem {
    fn phi_dim(&self) -> usize {
        1
    }

    fn lambda_dim(&self) -> usize {
        1
    }

    fn regime(&self) -> Regime {
        Regime::Standard
    }

    fn upper_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        Ok(self.g(scalar(phi, 1)?, scalar(lambda, 1)?))
    }

    fn lower_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        Ok(self.j(scalar(phi, 1)?, scalar(lambda, 1)?))
    }

    fn stochastic_grad(
        &self,
        target: GradTarget,
        phi: &ParamVec,
        lambda: &ParamVec,
        budget: &OracleBudget,
        rng: &RngStream,
    ) -> Result<ParamVec> {
        let v = noisy_grad(self, target, scalar(phi, 1)?, scalar(lambda, 1)?, budget.batch, rng)?;
        ParamVec::new(vec![v])
    }

    fn exact_grad(&self, target: GradTarget, phi: &ParamVec, lambda: &ParamVec) -> Result<ParamVec> {
        ParamVec::new(vec![self.grad(target, scalar(phi, 1)?, scalar(lambda, 1)?)])
    }
}

/// Starting point and fixed hyperparameters of a scheduled run.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Settings {
    pub constants: ScheduleConstants,
    /// Supplies η, τ, τ′, σ0, warm start and the sign conventions; σ, B, K,
    /// T are overwritten by the schedule.
    pub base: PenaltyConfig,
    pub phi0: f64,
    pub lambda0: f64,
}

/// A scheduled run and its stationarity metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Run {
    pub schedule: Schedule,
    pub record: RunRecord,
    /// `(1/T) Σ_t ‖∇Φ(φ_t)‖²` over the recorded iterates.
    pub grad_metric: f64,
    /// `grad_metric / ε`, the constant `c` with `metric = c·ε` for this run.
    pub bound_constant: f64,
}

/// Runs the penalty solver under the ε-schedule of the standard regime.
pub fn run_theorem2(problem: &SyntheticProblem, epsilon: f64, settings: &Theorem2Settings, seed: u64) -> Result<Theorem2Run> {
    let schedule = schedule_from_epsilon(epsilon, Regime::Standard, &settings.constants, &settings.base)?;
    let phi0 = ParamVec::new(vec![settings.phi0])?;
    let lambda0 = ParamVec::new(vec![settings.lambda0])?;
    let mut p = problem.clone();
    let record = run_algorithm1(&mut p, &schedule.config, &phi0, &lambda0, &lambda0, seed)?;
    let grad_metric = stationarity_metric(problem, &record);
    Ok(Theorem2Run { bound_constant: grad_metric / epsilon, schedule, record, grad_metric })
}

/// `(1/T) Σ_t ‖∇Φ(φ_t)‖²` over the rows of a record (NaN when empty).
pub fn stationarity_metric(problem: &SyntheticProblem, record: &RunRecord) -> f64 {
    let n = record.rows.len();
    record.rows.iter().map(|r| problem.hyper_grad(r.phi.get(0)).powi(2)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_instance_is_rejected() {
        assert!(make_pl_instance("cubic").is_err());
    }

    #[test]
    fn quad_argmax_is_phi() {
        let p = make_pl_instance("quad").unwrap();
        for phi in [-2.0, 0.0, 0.7, 3.0] {
            assert!((p.lambda_star(phi) - phi).abs() < 1e-8);
        }
        assert!((p.pl_measurement().ratio - 4.0).abs() < 1e-9);
    }

    #[test]
    fn sinsq_is_stationary_at_phi() {
        let p = make_pl_instance("sinsq").unwrap();
        assert_eq!(p.j(0.4, 0.4), 0.0);
        assert_eq!(p.grad(GradTarget::LambdaJ, 0.4, 0.4), 0.0);
        assert!(p.pl_mu() > 0.0 && p.pl_measurement().is_pl);
    }

    #[test]
    fn zero_noise_is_exact() {
        let p = make_pl_instance("sinsq").unwrap();
        let g = noisy_grad(&p, GradTarget::LambdaJ, 0.3, 1.2, 7, &RngStream::new(1, 0)).unwrap();
        assert_eq!(g, p.grad(GradTarget::LambdaJ, 0.3, 1.2));
    }
}
