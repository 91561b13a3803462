use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::estimators::{
    grad_lambda_j_exact, grad_lambda_j_sampled, grad_phi_j, grad_phi_j_exact, LowerSampling, RlContext,
};
use crate::mdp_env::{exact_discounted_return, MdpSpec, Policy, RewardModel};
use crate::param::ParamVec;
use crate::preference::{
    append_pairs, expected_upper, grad_lambda_g, grad_phi_g, grad_phi_g_full, make_pairs, upper_loss_g, Labeler,
    PreferencePair, SpaceKind,
};
use crate::problem::{BilevelProblem, GradTarget, OracleBudget, Regime};
use crate::rng::RngStream;

/// Where the upper-level preference pairs come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// Every upper oracle call draws `B` new labeled pairs from the policy it
    /// is evaluated at, so `G(φ, λ)` is the expected loss under `π_λ`.
    Fresh,
    /// Upper oracles subsample a persistent buffer; each outer iteration
    /// appends `refresh_count` pairs drawn from the current λ-stream policy.
    Buffer { refresh_count: usize },
}

/// Seed of the fixed stream used for Monte-Carlo objective values on
/// continuous environments.
const VALUE_SEED: u64 = 0x5eed_0f_7a1e;

/// Bilevel RL instance: reward head `r_φ` learned from preferences (upper
/// level) and a KL-regularized policy `π_λ` maximizing the induced return
/// (lower level).
#[derive(Clone, Debug)]
pub struct BrlProblem {
    env: MdpSpec,
    policy: Policy,
    policy_ref: Policy,
    reward: RewardModel,
    labeler: Labeler,
    pref_horizon: usize,
    pair_mode: PairMode,
    buffer: Vec<PreferencePair>,
    persist: Option<PathBuf>,
    q_rollouts: usize,
    lambda_bound: Option<f64>,
    value_batch: usize,
    value_horizon: usize,
}

impl BrlProblem {
    /// `policy` and `reward` fix the parameterizations; their parameter
    /// values are ignored in favor of the λ and φ handed to each oracle.
    pub fn new(
        env: MdpSpec,
        policy: Policy,
        policy_ref: Policy,
        reward: RewardModel,
        labeler: Labeler,
        pref_horizon: usize,
    ) -> Result<Self> {
        if pref_horizon == 0 {
            return Err(Error::invalid("preference horizon must be at least 1"));
        }
        if policy_ref.dim() != policy.dim() || policy_ref.n_actions() != policy.n_actions() {
            return Err(Error::invalid("reference policy must share the policy family"));
        }
        Ok(BrlProblem {
            env,
            policy,
            policy_ref,
            reward,
            labeler,
            pref_horizon,
            pair_mode: PairMode::Fresh,
            buffer: Vec::new(),
            persist: None,
            q_rollouts: 1,
            lambda_bound: None,
            value_batch: 4000,
            value_horizon: 200,
        })
    }

    pub fn with_pair_mode(mut self, mode: PairMode) -> Self {
        self.pair_mode = mode;
        self
    }

    /// Seeds the pair buffer.
    pub fn with_buffer(mut self, pairs: Vec<PreferencePair>) -> Self {
        self.buffer = pairs;
        self
    }

    /// Appends refreshed pairs to this dataset file as they are collected.
    pub fn with_persistence(mut self, path: PathBuf) -> Self {
        self.persist = Some(path);
        self
    }

    pub fn with_q_rollouts(mut self, q_rollouts: usize) -> Result<Self> {
        if q_rollouts == 0 {
            return Err(Error::invalid("q_rollouts must be at least 1"));
        }
        self.q_rollouts = q_rollouts;
        Ok(self)
    }

    /// Restricts λ to the box `[-bound, bound]^d`.
    pub fn with_lambda_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::invalid(format!("lambda bound must be positive, got {bound}")));
        }
        self.lambda_bound = Some(bound);
        Ok(self)
    }

    /// Sample sizes of the Monte-Carlo objective values used on continuous
    /// environments.
    pub fn with_value_sampling(mut self, batch: usize, horizon: usize) -> Result<Self> {
        if batch == 0 || horizon == 0 {
            return Err(Error::invalid("value sampling sizes must be at least 1"));
        }
        self.value_batch = batch;
        self.value_horizon = horizon;
        Ok(self)
    }

    pub fn env(&self) -> &MdpSpec {
        &self.env
    }

    pub fn labeler(&self) -> &Labeler {
        &self.labeler
    }

    pub fn pref_horizon(&self) -> usize {
        self.pref_horizon
    }

    pub fn pair_mode(&self) -> &PairMode {
        &self.pair_mode
    }

    pub fn buffer(&self) -> &[PreferencePair] {
        &self.buffer
    }

    pub fn policy_ref(&self) -> &Policy {
        &self.policy_ref
    }

    pub fn lambda_bound(&self) -> Option<f64> {
        self.lambda_bound
    }

    pub fn policy_at(&self, lambda: &ParamVec) -> Result<Policy> {
        self.policy.with_lambda(lambda.clone())
    }

    pub fn reward_at(&self, phi: &ParamVec) -> Result<RewardModel> {
        self.reward.with_phi(phi.clone())
    }

    fn space_kind(&self) -> SpaceKind {
        if self.env.is_finite() {
            SpaceKind::Discrete
        } else {
            SpaceKind::Continuous
        }
    }

    fn buffer_or_err(&self) -> Result<&[PreferencePair]> {
        if self.buffer.is_empty() {
            return Err(Error::invalid("preference buffer is empty"));
        }
        Ok(&self.buffer)
    }
}

impl BilevelProblem for BrlProblem {
    fn phi_dim(&self) -> usize {
        self.reward.dim()
    }

    fn lambda_dim(&self) -> usize {
        self.policy.dim()
    }

    fn regime(&self) -> Regime {
        Regime::Brl
    }

    fn upper_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        let reward = self.reward_at(phi)?;
        match self.pair_mode {
            PairMode::Buffer { .. } => upper_loss_g(&reward, self.buffer_or_err()?),
            PairMode::Fresh if self.env.is_finite() => {
                let policy = self.policy_at(lambda)?;
                Ok(expected_upper(&self.env, &policy, &reward, &self.labeler, self.pref_horizon)?.value)
            }
            PairMode::Fresh => {
                let policy = self.policy_at(lambda)?;
                let pairs = make_pairs(
                    &self.env,
                    &policy,
                    &self.labeler,
                    self.value_batch,
                    self.pref_horizon,
                    &RngStream::new(VALUE_SEED, 0),
                )?;
                upper_loss_g(&reward, &pairs)
            }
        }
    }

    fn lower_value(&self, phi: &ParamVec, lambda: &ParamVec) -> Result<f64> {
        let reward = self.reward_at(phi)?;
        let policy = self.policy_at(lambda)?;
        if self.env.is_finite() {
            return exact_discounted_return(&self.env, &policy, &self.policy_ref, &reward);
        }
        let engine = crate::estimators::Engine::new(
            &self.env,
            &policy,
            &self.policy_ref,
            &reward,
            crate::estimators::Tables::default(),
        )?;
        let root = RngStream::new(VALUE_SEED, 1);
        let total = crate::estimators::par_ordered_sum(self.value_batch, 1, |j, acc| {
            acc[0] += engine.rollout_return(None, self.value_horizon, &mut root.spawn(j as u64))?;
            Ok(())
        })?;
        Ok(total[0] / self.value_batch as f64)
    }

    fn stochastic_grad(
        &self,
        target: GradTarget,
        phi: &ParamVec,
        lambda: &ParamVec,
        budget: &OracleBudget,
        rng: &RngStream,
    ) -> Result<ParamVec> {
        let reward = self.reward_at(phi)?;
        let policy = self.policy_at(lambda)?;
        match target {
            GradTarget::PhiG => match self.pair_mode {
                PairMode::Fresh => {
                    let pairs = make_pairs(&self.env, &policy, &self.labeler, budget.batch, self.pref_horizon, rng)?;
                    grad_phi_g_full(&reward, &pairs)
                }
                PairMode::Buffer { .. } => {
                    let buf = self.buffer_or_err()?;
                    grad_phi_g(&reward, buf, budget.batch.min(buf.len()), rng)
                }
            },
            GradTarget::LambdaG => match self.pair_mode {
                PairMode::Fresh => grad_lambda_g(
                    &self.env,
                    &policy,
                    &reward,
                    &self.labeler,
                    budget.batch,
                    self.pref_horizon,
                    rng,
                ),
                PairMode::Buffer { .. } => Ok(ParamVec::zeros(self.lambda_dim())),
            },
            GradTarget::PhiJ => Ok(grad_phi_j(&self.env, &policy, &reward, budget.batch, budget.horizon, rng)?.grad),
            GradTarget::LambdaJ => {
                let ctx = RlContext { env: &self.env, policy: &policy, policy_ref: &self.policy_ref, reward: &reward };
                let sampling =
                    LowerSampling { n: budget.rollouts, b: budget.batch, h: budget.horizon, q_rollouts: self.q_rollouts };
                Ok(grad_lambda_j_sampled(&ctx, &sampling, rng)?.grad)
            }
        }
    }

    fn exact_grad(&self, target: GradTarget, phi: &ParamVec, lambda: &ParamVec) -> Result<ParamVec> {
        let reward = self.reward_at(phi)?;
        let policy = self.policy_at(lambda)?;
        match target {
            GradTarget::PhiG | GradTarget::LambdaG => match self.pair_mode {
                PairMode::Fresh => {
                    let e = expected_upper(&self.env, &policy, &reward, &self.labeler, self.pref_horizon)?;
                    Ok(if target == GradTarget::PhiG { e.grad_phi } else { e.grad_lambda })
                }
                PairMode::Buffer { .. } if target == GradTarget::PhiG => grad_phi_g_full(&reward, self.buffer_or_err()?),
                PairMode::Buffer { .. } => Ok(ParamVec::zeros(self.lambda_dim())),
            },
            GradTarget::PhiJ => grad_phi_j_exact(&self.env, &policy, &reward, None),
            GradTarget::LambdaJ => grad_lambda_j_exact(&RlContext {
                env: &self.env,
                policy: &policy,
                policy_ref: &self.policy_ref,
                reward: &reward,
            }),
        }
    }

    fn project_lambda(&self, lambda: ParamVec) -> ParamVec {
        match self.lambda_bound {
            Some(b) => lambda.map(|v| v.clamp(-b, b)).expect("clamping keeps values finite"),
            None => lambda,
        }
    }

    fn refresh(
        &mut self,
        _phi: &ParamVec,
        lambda: &ParamVec,
        _lambda_prime: &ParamVec,
        rng: &RngStream,
    ) -> Result<()> {
        let PairMode::Buffer { refresh_count } = self.pair_mode else {
            return Ok(());
        };
        if refresh_count == 0 {
            return Ok(());
        }
        let policy = self.policy_at(lambda)?;
        let pairs = make_pairs(&self.env, &policy, &self.labeler, refresh_count, self.pref_horizon, rng)?;
        if let Some(path) = &self.persist {
            append_pairs(path, self.space_kind(), &pairs)?;
        }
        self.buffer.extend(pairs);
        Ok(())
    }
}
