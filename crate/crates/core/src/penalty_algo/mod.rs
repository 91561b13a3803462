//! The penalty solver.
//!
//! Each outer iteration runs two normalized ascent loops: one on `J` (the
//! λ stream, approximating `λ*(φ)`) and one on `h_σ = J − σG` (the λ′ stream,
//! approximating `λ*_σ(φ)`). The hypergradient
//!
//! ```text
//! d = ∇φĜ(φ, λ′) + (∇φĴ(φ, λ) − ∇φĴ(φ, λ′)) / σ
//! ```
//!
//! is the Danskin gradient of `Φσ(φ) = min_λ G + (J(φ, λ*) − J(φ, λ)) / σ`, and
//! the outer step is `φ ← φ − η d`. No Hessian-vector products are needed.
//!
//! Randomness layout: outer iteration `t` owns child `t` of the run stream;
//! within it, child 0 feeds the refresh hook, child 1 the inner loops and
//! child 2 the hypergradient. The two ∇λĴ calls of inner step `k` share one
//! stream, as do the two ∇φĴ calls of the hypergradient, so the penalty
//! differences use common random numbers.

mod brl;
mod record;
mod schedule;

pub use brl::{BrlProblem, PairMode};
pub use record::{RunRecord, RunRow};
pub use schedule::{schedule_from_epsilon, total_samples, Schedule, ScheduleConstants};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::problem::{BilevelProblem, GradTarget, OracleBudget, Regime};
use crate::rng::RngStream;

/// Sign convention of the penalty difference in the hypergradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Line10Sign {
    /// `+ (∇φĴ(λ) − ∇φĴ(λ′)) / σ`, the gradient of the penalty objective.
    #[default]
    Derivation,
    /// `− (∇φĴ(λ) − ∇φĴ(λ′)) / σ`, the opposite sign convention.
    PaperAlg,
}

/// Outer objective whose gradient drives φ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterLoss {
    /// The penalty proxy `Φσ`.
    #[default]
    Penalty,
    /// `G + V*(φ)/σ` with the current λ-stream return as the `V*` plug-in.
    Vstar,
}

/// Hyperparameters of the penalty solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Penalty parameter σ.
    pub sigma: f64,
    /// Ceiling σ0 on admissible penalties.
    pub sigma0: f64,
    /// Outer step η.
    pub eta: f64,
    /// Inner step τ of the λ stream.
    pub tau: f64,
    /// Inner step τ′ of the λ′ stream.
    pub tau_prime: f64,
    /// Inner iterations per outer iteration.
    pub k: usize,
    /// Outer iterations.
    pub t: usize,
    /// Q-rollout (occupancy sample) count.
    pub n: usize,
    /// Gradient batch size.
    pub b: usize,
    /// Truncation horizon.
    pub h: usize,
    /// Discount factor of the lower-level MDP.
    pub gamma: f64,
    /// KL weight.
    pub beta: f64,
    /// Initialize each outer iteration's inner loops at the previous outputs.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub line10_sign: Line10Sign,
    #[serde(default)]
    pub outer_loss: OuterLoss,
    /// Cap on `η‖d‖`; when exceeded, η is halved for that step until it fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_phi_step: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl PenaltyConfig {
    /// Checks every field against its admissible range.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("sigma", self.sigma)?;
        positive("sigma0", self.sigma0)?;
        if self.sigma > self.sigma0 {
            return Err(Error::invalid(format!("sigma {} exceeds the ceiling sigma0 {}", self.sigma, self.sigma0)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be non-negative, got {}", self.eta)));
        }
        positive("tau", self.tau)?;
        positive("tau_prime", self.tau_prime)?;
        for (name, v) in [("n", self.n), ("b", self.b), ("h", self.h)] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if let Some(cap) = self.max_phi_step {
            positive("max_phi_step", cap)?;
        }
        Ok(())
    }

    pub fn budget(&self) -> OracleBudget {
        OracleBudget { rollouts: self.n, batch: self.b, horizon: self.h }
    }

    /// Samples charged to one outer iteration: `K(n + BH) + BH` in the BRL
    /// regime and `KB + B` in the standard regime.
    pub fn samples_per_outer(&self, regime: Regime) -> u64 {
        let (k, n, b, h) = (self.k as u64, self.n as u64, self.b as u64, self.h as u64);
        match regime {
            Regime::Brl => k * (n + b * h) + b * h,
            Regime::Standard => k * b + b,
        }
    }

    /// Step sizes at the stated ceilings `η = 1/(2L)`, `τ = 1/L_J`, `τ′ = 1/L_h`.
    pub fn steps_from_smoothness(l_phi: f64, l_j: f64, l_h: f64) -> Result<(f64, f64, f64)> {
        for (name, v) in [("L", l_phi), ("L_J", l_j), ("L_h", l_h)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("smoothness constant {name} must be positive, got {v}")));
            }
        }
        Ok((1.0 / (2.0 * l_phi), 1.0 / l_j, 1.0 / l_h))
    }
}

/// Output of the inner loops.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerResult {
    /// λ^K
    pub lambda: ParamVec,
    /// λ′^K
    pub lambda_prime: ParamVec,
    /// ‖d_{K−1}‖ (zero when K = 0).
    pub last_d_norm: f64,
    /// ‖d′_{K−1}‖ (zero when K = 0).
    pub last_dp_norm: f64,
    /// Steps skipped because the direction vanished, per stream.
    pub skipped: (usize, usize),
}

/// Directions below this norm are treated as zero and the step is skipped.
pub const ZERO_DIRECTION: f64 = 1e-12;

fn normalized_step<P: BilevelProblem + ?Sized>(
    problem: &P,
    x: &ParamVec,
    d: &ParamVec,
    step: f64,
) -> Result<Option<ParamVec>> {
    let norm = d.norm();
    if norm < ZERO_DIRECTION {
        return Ok(None);
    }
    Ok(Some(problem.project_lambda(ParamVec::axpy(step / norm, d, x)?)))
}

/// `K` normalized ascent steps on `J` (λ stream) and on `J − σG` (λ′ stream).
pub fn inner_loops<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamVec,
    lambda_init: &ParamVec,
    lambda_prime_init: &ParamVec,
    cfg: &PenaltyConfig,
    rng: &RngStream,
) -> Result<InnerResult> {
    if lambda_init.dim() != problem.lambda_dim() || lambda_prime_init.dim() != problem.lambda_dim() {
        return Err(Error::DimensionMismatch { expected: problem.lambda_dim(), got: lambda_init.dim() });
    }
    let budget = cfg.budget();
    let mut lambda = lambda_init.clone();
    let mut lambda_prime = lambda_prime_init.clone();
    let mut out = InnerResult {
        lambda: lambda.clone(),
        lambda_prime: lambda_prime.clone(),
        last_d_norm: 0.0,
        last_dp_norm: 0.0,
        skipped: (0, 0),
    };
    for k in 0..cfg.k {
        let step_rng = rng.spawn(k as u64);
        let shared = step_rng.spawn(0);
        let d = problem.stochastic_grad(GradTarget::LambdaJ, phi, &lambda, &budget, &shared)?;
        let mut dp = problem.stochastic_grad(GradTarget::LambdaJ, phi, &lambda_prime, &budget, &shared)?;
        if cfg.sigma != 0.0 {
            let g = problem.stochastic_grad(GradTarget::LambdaG, phi, &lambda_prime, &budget, &step_rng.spawn(1))?;
            dp = ParamVec::axpy(-cfg.sigma, &g, &dp)?;
        }
        out.last_d_norm = d.norm();
        out.last_dp_norm = dp.norm();
        match normalized_step(problem, &lambda, &d, cfg.tau)? {
            Some(next) => lambda = next,
            None => out.skipped.0 += 1,
        }
        match normalized_step(problem, &lambda_prime, &dp, cfg.tau_prime)? {
            Some(next) => lambda_prime = next,
            None => out.skipped.1 += 1,
        }
    }
    out.lambda = lambda;
    out.lambda_prime = lambda_prime;
    Ok(out)
}

/// Penalty hypergradient at φ from the inner-loop outputs.
pub fn penalty_hypergradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamVec,
    lambda_k: &ParamVec,
    lambda_prime_k: &ParamVec,
    cfg: &PenaltyConfig,
    rng: &RngStream,
) -> Result<ParamVec> {
    if cfg.sigma == 0.0 {
        return Err(Error::invalid("penalty hypergradient is undefined at sigma = 0"));
    }
    let budget = cfg.budget();
    let g = problem.stochastic_grad(GradTarget::PhiG, phi, lambda_prime_k, &budget, &rng.spawn(0))?;
    let shared = rng.spawn(1);
    let j_star = problem.stochastic_grad(GradTarget::PhiJ, phi, lambda_k, &budget, &shared)?;
    let d = match cfg.outer_loss {
        OuterLoss::Penalty => {
            let j_sigma = problem.stochastic_grad(GradTarget::PhiJ, phi, lambda_prime_k, &budget, &shared)?;
            let diff = j_star.sub(&j_sigma)?;
            let sign = match cfg.line10_sign {
                Line10Sign::Derivation => 1.0,
                Line10Sign::PaperAlg => -1.0,
            };
            ParamVec::axpy(sign / cfg.sigma, &diff, &g)?
        }
        OuterLoss::Vstar => ParamVec::axpy(1.0 / cfg.sigma, &j_star, &g)?,
    };
    Ok(d)
}

/// Runs `T` outer iterations from `(φ0, λ0, λ′0)`.
///
/// Invalid configurations are errors. Failures during the run (non-finite
/// iterates, oracle errors) stop the loop and are reported in
/// [`RunRecord::aborted`] alongside every row completed before the failure.
pub fn run_algorithm1<P: BilevelProblem + ?Sized>(
    problem: &mut P,
    cfg: &PenaltyConfig,
    phi0: &ParamVec,
    lambda0: &ParamVec,
    lambda_prime0: &ParamVec,
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate()?;
    if phi0.dim() != problem.phi_dim() {
        return Err(Error::DimensionMismatch { expected: problem.phi_dim(), got: phi0.dim() });
    }
    let regime = problem.regime();
    let mut record = RunRecord::new(cfg.clone(), seed, regime, phi0.clone(), lambda0.clone(), lambda_prime0.clone());
    let root = RngStream::new(seed, 0);
    let mut phi = phi0.clone();
    let mut lambda = lambda0.clone();
    let mut lambda_prime = lambda_prime0.clone();
    let per_outer = cfg.samples_per_outer(regime);
    let mut samples = 0u64;
    for t in 0..cfg.t {
        let outer = root.spawn(t as u64);
        let step = (|| -> Result<(RunRow, ParamVec, InnerResult)> {
            problem.refresh(&phi, &lambda, &lambda_prime, &outer.spawn(0))?;
            let (init, init_prime) = if cfg.warm_start {
                (lambda.clone(), lambda_prime.clone())
            } else {
                (lambda0.clone(), lambda_prime0.clone())
            };
            let inner = inner_loops(&*problem, &phi, &init, &init_prime, cfg, &outer.spawn(1))?;
            let d = penalty_hypergradient(&*problem, &phi, &inner.lambda, &inner.lambda_prime, cfg, &outer.spawn(2))?;
            let upper = problem.upper_value(&phi, &inner.lambda_prime)?;
            let lower = problem.lower_value(&phi, &inner.lambda)?;
            let mut eta = cfg.eta;
            if let Some(cap) = cfg.max_phi_step {
                while eta * d.norm() > cap {
                    eta *= 0.5;
                }
            }
            let next_phi = ParamVec::axpy(-eta, &d, &phi)?;
            let row = RunRow {
                t,
                phi: phi.clone(),
                d_norm: d.norm(),
                upper_loss: upper,
                lower_value: lower,
                inner_d_norm: inner.last_d_norm,
                inner_dp_norm: inner.last_dp_norm,
                samples: samples + per_outer,
            };
            Ok((row, next_phi, inner))
        })();
        match step {
            Ok((row, next_phi, inner)) => {
                samples = row.samples;
                record.rows.push(row);
                phi = next_phi;
                lambda = inner.lambda;
                lambda_prime = inner.lambda_prime;
            }
            Err(e) => {
                record.aborted = Some(format!("outer iteration {t}: {e}"));
                break;
            }
        }
    }
    record.final_phi = phi;
    record.final_lambda = lambda;
    record.final_lambda_prime = lambda_prime;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `G = (φ−1)² + (λ−1)²`, `J = −(λ−φ)²` with exact oracles.
    struct Quad;

    impl BilevelProblem for Quad {
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
            Ok((phi.get(0) - 1.0).powi(2) + (lambda.get(0) - 1.0).powi(2))
        }
        fn lower_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
            Ok(-(lambda.get(0) - phi.get(0)).powi(2))
        }
        fn stochastic_grad(
            &self,
            target: GradTarget,
            phi: &ParamVec,
            lambda: &ParamVec,
            _budget: &OracleBudget,
            _rng: &RngStream,
        ) -> Result<ParamVec> {
            let (p, l) = (phi.get(0), lambda.get(0));
            let v = match target {
                GradTarget::PhiG => 2.0 * (p - 1.0),
                GradTarget::LambdaG => 2.0 * (l - 1.0),
                GradTarget::PhiJ => 2.0 * (l - p),
                GradTarget::LambdaJ => -2.0 * (l - p),
            };
            ParamVec::new(vec![v])
        }
    }

    fn cfg() -> PenaltyConfig {
        PenaltyConfig {
            sigma: 0.1,
            sigma0: 1.0,
            eta: 0.1,
            tau: 0.01,
            tau_prime: 0.01,
            k: 50,
            t: 5,
            n: 1,
            b: 1,
            h: 1,
            gamma: 0.9,
            beta: 0.0,
            warm_start: true,
            line10_sign: Line10Sign::Derivation,
            outer_loss: OuterLoss::Penalty,
            max_phi_step: None,
        }
    }

    #[test]
    fn zero_inner_iterations_return_inits() {
        let c = PenaltyConfig { k: 0, ..cfg() };
        let l0 = ParamVec::new(vec![0.3]).unwrap();
        let l1 = ParamVec::new(vec![-0.2]).unwrap();
        let r = inner_loops(&Quad, &ParamVec::new(vec![0.5]).unwrap(), &l0, &l1, &c, &RngStream::new(0, 0)).unwrap();
        assert_eq!(r.lambda, l0);
        assert_eq!(r.lambda_prime, l1);
    }

    #[test]
    fn zero_sigma_streams_coincide() {
        let c = PenaltyConfig { sigma: 0.0, ..cfg() };
        let l0 = ParamVec::new(vec![0.3]).unwrap();
        let r = inner_loops(&Quad, &ParamVec::new(vec![0.5]).unwrap(), &l0, &l0, &c, &RngStream::new(0, 0)).unwrap();
        assert_eq!(r.lambda, r.lambda_prime);
        assert!(penalty_hypergradient(&Quad, &ParamVec::new(vec![0.5]).unwrap(), &l0, &l0, &c, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn equal_inner_outputs_cancel_penalty() {
        let phi = ParamVec::new(vec![0.2]).unwrap();
        let l = ParamVec::new(vec![0.7]).unwrap();
        let d = penalty_hypergradient(&Quad, &phi, &l, &l, &cfg(), &RngStream::new(1, 0)).unwrap();
        assert_eq!(d.get(0), 2.0 * (0.2 - 1.0));
    }

    #[test]
    fn zero_outer_iterations_give_empty_record() {
        let c = PenaltyConfig { t: 0, ..cfg() };
        let phi = ParamVec::new(vec![0.2]).unwrap();
        let rec = run_algorithm1(&mut Quad, &c, &phi, &phi, &phi, 3).unwrap();
        assert!(rec.rows.is_empty());
        assert_eq!(rec.final_phi, phi);
    }

    #[test]
    fn zero_eta_keeps_phi_fixed() {
        let c = PenaltyConfig { eta: 0.0, ..cfg() };
        let phi = ParamVec::new(vec![0.2]).unwrap();
        let rec = run_algorithm1(&mut Quad, &c, &phi, &phi, &phi, 3).unwrap();
        assert_eq!(rec.rows.len(), 5);
        assert!(rec.rows.iter().all(|r| r.phi == phi && r.inner_d_norm.is_finite()));
        assert_eq!(rec.final_phi, phi);
    }

    #[test]
    fn sigma_above_ceiling_is_rejected() {
        assert!(PenaltyConfig { sigma: 2.0, ..cfg() }.validate().is_err());
    }
}
