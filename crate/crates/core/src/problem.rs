//! The bilevel problem interface.
//!
//! A problem pairs an upper objective `G(φ, λ)` (minimized over φ at the best
//! response) with a lower objective `J(φ, λ)` (maximized over λ). Solvers only
//! touch a problem through the stochastic gradient oracles, the optional exact
//! oracles, and the projection onto the admissible policy set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::rng::RngStream;

/// Which partial gradient an oracle call returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradTarget {
    /// ∇φ G
    PhiG,
    /// ∇λ G
    LambdaG,
    /// ∇φ J
    PhiJ,
    /// ∇λ J
    LambdaJ,
}

impl GradTarget {
    pub const ALL: [GradTarget; 4] =
        [GradTarget::PhiG, GradTarget::LambdaG, GradTarget::PhiJ, GradTarget::LambdaJ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::PhiG => "grad_phi_G",
            GradTarget::LambdaG => "grad_lambda_G",
            GradTarget::PhiJ => "grad_phi_J",
            GradTarget::LambdaJ => "grad_lambda_J",
        }
    }
}

/// Sample sizes handed to a stochastic oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleBudget {
    /// Q-rollout count `n` (BRL lower gradient only).
    pub rollouts: usize,
    /// Gradient batch size `B`.
    pub batch: usize,
    /// Truncation horizon `H`.
    pub horizon: usize,
}

/// Sample-accounting regime of a problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Bilevel RL: biased lower gradients with `n`, `B`, `H`.
    Brl,
    /// Standard bilevel: unbiased batched oracles with `B` only.
    Standard,
}

/// Upper objective `G` and lower objective `J` with gradient oracles.
///
/// Oracles must be pure functions of their inputs and the identity of the
/// supplied [`RngStream`]; implementations derive child streams from it rather
/// than consuming a shared generator, so concurrent calls with distinct streams
/// are safe.
pub trait BilevelProblem: Sync {
    fn phi_dim(&self) -> usize;

    fn lambda_dim(&self) -> usize;

    fn regime(&self) -> Regime;

    /// `G(φ, λ)`.
    fn upper_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64>;

    /// `J(φ, λ)`.
    fn lower_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64>;

    /// Stochastic estimate of the requested partial gradient.
    fn stochastic_grad(
        &self,
        target: GradTarget,
        phi: &ParamVec,
        lambda: &ParamVec,
        budget: &OracleBudget,
        rng: &RngStream,
    ) -> Result<ParamVec>;

    /// Exact partial gradient, when the problem can compute one.
    fn exact_grad(&self, target: GradTarget, _phi: &ParamVec, _lambda: &ParamVec) -> Result<ParamVec> {
        Err(Error::unsupported(format!("exact {} is not available for this problem", target.name())))
    }

    /// Maps λ back onto the admissible policy-parameter set.
    fn project_lambda(&self, lambda: ParamVec) -> ParamVec {
        lambda
    }

    /// Hook run at the start of each outer iteration (e.g. to collect new
    /// preference data with the current policies).
    fn refresh(
        &mut self,
        _phi: &ParamVec,
        _lambda: &ParamVec,
        _lambda_prime: &ParamVec,
        _rng: &RngStream,
    ) -> Result<()> {
        Ok(())
    }
}

/// Adapter that answers every stochastic oracle call with the exact gradient.
pub struct ExactOracles<'a, P: BilevelProblem + ?Sized>(pub &'a P);

impl<P: BilevelProblem + ?Sized> BilevelProblem for ExactOracles<'_, P> {
    fn phi_dim(&self) -> usize {
        self.0.phi_dim()
    }

    fn lambda_dim(&self) -> usize {
        self.0.lambda_dim()
    }

    fn regime(&self) -> Regime {
        self.0.regime()
    }

    fn upper_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        self.0.upper_value(phi, lambda)
    }

    fn lower_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        self.0.lower_value(phi, lambda)
    }

    fn stochastic_grad(
        &self,
        target: GradTarget,
        phi: &ParamVec,
        lambda: &ParamVec,
        _budget: &OracleBudget,
        _rng: &RngStream,
    ) -> Result<ParamVec> {
        self.0.exact_grad(target, phi, lambda)
    }

    fn exact_grad(&self, target: GradTarget, phi: &ParamVec, lambda: &ParamVec) -> Result<ParamVec> {
        self.0.exact_grad(target, phi, lambda)
    }

    fn project_lambda(&self, lambda: ParamVec) -> ParamVec {
        self.0.project_lambda(lambda)
    }
}
