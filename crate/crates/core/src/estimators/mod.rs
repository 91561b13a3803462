//! Stochastic gradient estimators for the RL lower level and the reward head.
//!
//! - [`mc_q_estimate`]: truncated Monte-Carlo Q on the KL-regularized reward.
//! - [`grad_lambda_j`]: policy gradient of `J` w.r.t. λ, a score term over
//!   discounted-occupancy samples plus a batched KL-gradient term.
//! - [`grad_phi_j`]: truncated, batched gradient of `J` w.r.t. the reward
//!   parameters φ.
//!
//! Each estimator has an exact counterpart for finite environments, built on
//! the occupancy enumeration and the tabular solver in [`crate::mdp_env`].
//!
//! All estimators take the random stream by reference and derive one child
//! stream per sample, so results are independent of scheduling. Batches are
//! reduced in fixed blocks in index order.

mod engine;

pub(crate) use engine::{Engine, Tables};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp_env::{
    discounted_occupancy, exact_q_table, policy_table, Action, MdpSpec, Policy, RewardModel, State,
};
use crate::param::{check_finite, ParamVec};
use crate::rng::RngStream;

/// The pieces every RL estimator needs: environment, policy `π_λ`, reference
/// policy and reward head.
#[derive(Clone, Copy, Debug)]
pub struct RlContext<'a> {
    pub env: &'a MdpSpec,
    pub policy: &'a Policy,
    pub policy_ref: &'a Policy,
    pub reward: &'a RewardModel,
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub rollouts: usize,
}

/// ∇λĴ together with the sample sizes that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerGradEstimate {
    pub grad: ParamVec,
    pub n_used: usize,
    pub b_used: usize,
    pub h_used: usize,
}

/// ∇φĴ together with the sample sizes that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardGradEstimate {
    pub grad: ParamVec,
    pub b_used: usize,
    pub h_used: usize,
}

/// Sample sizes of the lower-level policy gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LowerSampling {
    /// Occupancy samples in the score term.
    pub n: usize,
    /// Trajectories in the KL term.
    pub b: usize,
    /// Horizon of KL trajectories and of Q rollouts.
    pub h: usize,
    /// Rollouts averaged into each Q̂.
    pub q_rollouts: usize,
}

const BLOCK: usize = 32;

/// Sums `f(i, acc)` contributions for `i < count` in fixed blocks, reducing
/// blocks in index order.
pub(crate) fn par_ordered_sum<F>(count: usize, dim: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let blocks = count.div_ceil(BLOCK);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; dim];
            for i in b * BLOCK..((b + 1) * BLOCK).min(count) {
                f(i, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(total)
}

fn check_counts(pairs: &[(&str, usize)]) -> Result<()> {
    for (name, v) in pairs {
        if *v == 0 {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

/// Averages `n` truncated returns `Σ_{t=1..H} γ^{t−1}(r_φ + β·h)` of rollouts
/// started at `(s, a)`.
pub fn mc_q_estimate(ctx: &RlContext, s: State, a: Action, n: usize, horizon: usize, rng: &RngStream) -> Result<QEstimate> {
    check_counts(&[("n", n), ("H", horizon)])?;
    if !ctx.env.contains(&s) {
        return Err(Error::OutOfSpace(format!("{s:?}")));
    }
    let engine = Engine::new(ctx.env, ctx.policy, ctx.policy_ref, ctx.reward, Tables::default())?;
    mc_q_with(&engine, s, a, n, horizon, rng)
}

fn mc_q_with(engine: &Engine, s: State, a: Action, n: usize, horizon: usize, rng: &RngStream) -> Result<QEstimate> {
    let sums = par_ordered_sum(n, 2, |j, acc| {
        let g = engine.rollout_return(Some((s, a)), horizon, &mut rng.spawn(j as u64))?;
        acc[0] += g;
        acc[1] += g * g;
        Ok(())
    })?;
    let mean = sums[0] / n as f64;
    let var = if n > 1 { ((sums[1] - n as f64 * mean * mean) / (n as f64 - 1.0)).max(0.0) } else { 0.0 };
    if !mean.is_finite() {
        return Err(Error::NonFinite("Monte-Carlo Q estimate".into()));
    }
    Ok(QEstimate { mean, std_error: (var / n as f64).sqrt(), rollouts: n })
}

/// ∇λĴ with one rollout per Q̂.
pub fn grad_lambda_j(ctx: &RlContext, n: usize, b: usize, h: usize, rng: &RngStream) -> Result<LowerGradEstimate> {
    grad_lambda_j_sampled(ctx, &LowerSampling { n, b, h, q_rollouts: 1 }, rng)
}

/// ∇λĴ: `(1/(1−γ))·(1/n) Σ_i ∇log π(a_i|s_i)·(Q̂(s_i, a_i) − β h(s_i, a_i))
/// + (β/B) Σ_j Σ_i γ^{i−1} ∇log π(a|s)·(1 + h(s, a))`.
///
/// The `(s_i, a_i)` are drawn from the normalized discounted occupancy by
/// geometric stopping. The `−β h` shift keeps the sum unbiased for ∇λJ: the
/// KL term already carries the per-step `h` contribution.
pub fn grad_lambda_j_sampled(ctx: &RlContext, sampling: &LowerSampling, rng: &RngStream) -> Result<LowerGradEstimate> {
    let LowerSampling { n, b, h, q_rollouts } = *sampling;
    check_counts(&[("n", n), ("B", b), ("H", h), ("q_rollouts", q_rollouts)])?;
    let engine = Engine::new(ctx.env, ctx.policy, ctx.policy_ref, ctx.reward, Tables { score: true, reward_grad: false })?;
    let dim = ctx.policy.dim();
    let gamma = engine.gamma();
    let beta = engine.beta();

    let occ_root = rng.spawn(0);
    let score = par_ordered_sum(n, dim, |i, acc| {
        let sample = occ_root.spawn(i as u64);
        let mut walk = sample.spawn(0);
        let mut s = engine.initial(&mut walk);
        let a = loop {
            let a = engine.action(&s, &mut walk)?;
            if walk.uniform() < 1.0 - gamma {
                break a;
            }
            s = engine.next(&s, &a, &mut walk)?;
        };
        let q = mc_q_with(&engine, s, a, q_rollouts, h, &sample.spawn(1))?.mean;
        let (_, kl) = engine.reward_and_kl(&s, &a)?;
        engine.add_score(&s, &a, q - beta * kl, acc)
    })?;

    let mut grad: Vec<f64> = score.iter().map(|v| v / ((1.0 - gamma) * n as f64)).collect();

    if beta != 0.0 {
        let kl_root = rng.spawn(1);
        let kl_sum = par_ordered_sum(b, dim, |j, acc| {
            let mut r = kl_root.spawn(j as u64);
            let mut s = engine.initial(&mut r);
            let mut disc = 1.0;
            for t in 0..h {
                let a = engine.action(&s, &mut r)?;
                let (_, kl) = engine.reward_and_kl(&s, &a)?;
                engine.add_score(&s, &a, disc * (1.0 + kl), acc)?;
                disc *= gamma;
                if t + 1 < h {
                    s = engine.next(&s, &a, &mut r)?;
                }
            }
            Ok(())
        })?;
        for (g, k) in grad.iter_mut().zip(kl_sum) {
            *g += beta * k / b as f64;
        }
    }
    check_finite(&grad, "grad_lambda_J")?;
    Ok(LowerGradEstimate { grad: ParamVec::new(grad)?, n_used: n, b_used: b, h_used: h })
}

/// ∇φĴ: `(1/B) Σ_j Σ_{i=1..H} γ^{i−1} ∇φ r_φ(s_{j,i}, a_{j,i})`.
pub fn grad_phi_j(
    env: &MdpSpec,
    policy: &Policy,
    reward: &RewardModel,
    b: usize,
    h: usize,
    rng: &RngStream,
) -> Result<RewardGradEstimate> {
    check_counts(&[("B", b), ("H", h)])?;
    let engine = Engine::new(env, policy, policy, reward, Tables { score: false, reward_grad: true })?;
    let gamma = engine.gamma();
    let sum = par_ordered_sum(b, reward.dim(), |j, acc| {
        let mut r = rng.spawn(j as u64);
        let mut s = engine.initial(&mut r);
        let mut disc = 1.0;
        for t in 0..h {
            let a = engine.action(&s, &mut r)?;
            engine.add_reward_grad(&s, &a, disc, acc)?;
            disc *= gamma;
            if t + 1 < h {
                s = engine.next(&s, &a, &mut r)?;
            }
        }
        Ok(())
    })?;
    let grad: Vec<f64> = sum.iter().map(|v| v / b as f64).collect();
    check_finite(&grad, "grad_phi_J")?;
    Ok(RewardGradEstimate { grad: ParamVec::new(grad)?, b_used: b, h_used: h })
}

/// Per-sample KL-gradient `∇λ log π(a|s)·(1 + log π(a|s) − log π_ref(a|s))`.
pub fn kl_grad_sample(policy: &Policy, policy_ref: &Policy, s: &State, a: &Action) -> Result<ParamVec> {
    let h = policy.log_prob(s, a)? - policy_ref.log_prob(s, a)?;
    let mut out = vec![0.0; policy.dim()];
    policy.add_grad_log_prob(s, a, 1.0 + h, &mut out)?;
    ParamVec::new(out)
}

/// Exact step-indexed state-action distribution of a finite environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    n_states: usize,
    n_actions: usize,
    /// `[i][s][a]`
    probs: Vec<f64>,
}

impl Occupancy {
    pub fn horizon(&self) -> usize {
        self.probs.len() / (self.n_states * self.n_actions)
    }

    /// `Pr(s_i = s, a_i = a)` for the zero-based step `i`.
    pub fn get(&self, i: usize, s: usize, a: usize) -> f64 {
        self.probs[(i * self.n_states + s) * self.n_actions + a]
    }

    /// The distribution at zero-based step `i`, laid out as `[s][a]`.
    pub fn step(&self, i: usize) -> &[f64] {
        let w = self.n_states * self.n_actions;
        &self.probs[i * w..(i + 1) * w]
    }
}

/// Exact distribution of `(s_i, a_i)` for `i = 1..H` under `π_λ` and `ν`.
pub fn occupancy_enumerate(env: &MdpSpec, policy: &Policy, horizon: usize) -> Result<Occupancy> {
    check_counts(&[("H", horizon)])?;
    let t = env.tabular()?;
    let pi = policy_table(env, policy)?;
    let (ns, na) = (t.n_states(), t.n_actions());
    let mut probs = Vec::with_capacity(horizon * ns * na);
    let mut state_dist = t.init().to_vec();
    for _ in 0..horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let p = state_dist[s] * pi[s * na + a];
                probs.push(p);
                for (s2, q) in t.next_distribution(s, a).iter().enumerate() {
                    next[s2] += p * q;
                }
            }
        }
        state_dist = next;
    }
    Ok(Occupancy { n_states: ns, n_actions: na, probs })
}

/// Expectation of [`grad_phi_j`] by exact enumeration. `horizon: None` gives
/// the untruncated gradient `∇φJ`.
pub fn grad_phi_j_exact(env: &MdpSpec, policy: &Policy, reward: &RewardModel, horizon: Option<usize>) -> Result<ParamVec> {
    let t = env.tabular()?;
    let (ns, na) = (t.n_states(), t.n_actions());
    let weights: Vec<f64> = match horizon {
        Some(h) => {
            let occ = occupancy_enumerate(env, policy, h)?;
            let mut w = vec![0.0; ns * na];
            let mut disc = 1.0;
            for i in 0..h {
                for (wk, p) in w.iter_mut().zip(occ.step(i)) {
                    *wk += disc * p;
                }
                disc *= t.gamma();
            }
            w
        }
        None => discounted_occupancy(env, policy)?.iter().map(|d| d / (1.0 - t.gamma())).collect(),
    };
    let mut out = vec![0.0; reward.dim()];
    for s in 0..ns {
        for a in 0..na {
            reward.add_reward_grad(&State::Discrete(s), &Action::Discrete(a), weights[s * na + a], &mut out)?;
        }
    }
    ParamVec::new(out)
}

/// Expectation of [`grad_lambda_j`] with exact Q and exact discounted
/// occupancy, i.e. the true ∇λJ including the KL contribution.
pub fn grad_lambda_j_exact(ctx: &RlContext) -> Result<ParamVec> {
    let t = ctx.env.tabular()?;
    let (ns, na) = (t.n_states(), t.n_actions());
    let gamma = t.gamma();
    let beta = ctx.reward.beta();
    let d = discounted_occupancy(ctx.env, ctx.policy)?;
    let q = exact_q_table(ctx.env, ctx.policy, ctx.policy_ref, ctx.reward)?;
    let pi = policy_table(ctx.env, ctx.policy)?;
    let pi_ref = policy_table(ctx.env, ctx.policy_ref)?;
    let mut out = vec![0.0; ctx.policy.dim()];
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            let kl = if beta == 0.0 { 0.0 } else { pi[i].ln() - pi_ref[i].ln() };
            let w = d[i] / (1.0 - gamma) * (q[i] - beta * kl + beta * (1.0 + kl));
            ctx.policy.add_grad_log_prob(&State::Discrete(s), &Action::Discrete(a), w, &mut out)?;
        }
    }
    ParamVec::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp_env::{FeatureTable, RewardFeatures, Squash, TabularMdp};

    fn logit(c: f64) -> f64 {
        (c / (1.0 - c)).ln()
    }

    fn one_state(c: f64) -> (MdpSpec, Policy, RewardModel) {
        let env = MdpSpec::Tabular(TabularMdp::cycle(1, 1, 0.9).unwrap());
        let pol = Policy::softmax(ParamVec::zeros(1), FeatureTable::one_hot(1, 1), 0.0).unwrap();
        let rew = RewardModel::new(
            ParamVec::new(vec![logit(c)]).unwrap(),
            RewardFeatures::Table(FeatureTable::one_hot(1, 1)),
            0.0,
            Squash::Logistic,
        )
        .unwrap();
        (env, pol, rew)
    }

    #[test]
    fn mc_q_single_state_is_exact() {
        let (env, pol, rew) = one_state(0.4);
        let ctx = RlContext { env: &env, policy: &pol, policy_ref: &pol, reward: &rew };
        let q = mc_q_estimate(&ctx, State::Discrete(0), Action::Discrete(0), 7, 10, &RngStream::new(1, 0)).unwrap();
        let expect = 0.4 * (1.0 - 0.9f64.powi(10)) / 0.1;
        assert!((q.mean - expect).abs() < 1e-12);
        assert!(q.std_error < 1e-12);
    }

    #[test]
    fn grad_phi_single_state_closed_form() {
        let (env, pol, rew) = one_state(0.4);
        let g = grad_phi_j(&env, &pol, &rew, 5, 12, &RngStream::new(2, 0)).unwrap();
        let expect = 0.4 * 0.6 * (1.0 - 0.9f64.powi(12)) / 0.1;
        assert!((g.grad.get(0) - expect).abs() < 1e-12);
    }

    #[test]
    fn occupancy_first_step_is_init_times_policy() {
        let env = MdpSpec::chain(3, 0.2, 0.9).unwrap();
        let pol = Policy::softmax(ParamVec::new(vec![0.5, -0.5, 1.0, 0.0, -1.0, 2.0]).unwrap(), FeatureTable::one_hot(3, 2), 0.05)
            .unwrap();
        let occ = occupancy_enumerate(&env, &pol, 6).unwrap();
        for s in 0..3 {
            let p = pol.probs(s);
            for a in 0..2 {
                assert!((occ.get(0, s, a) - p[a] / 3.0).abs() < 1e-15);
            }
        }
        for i in 0..6 {
            assert!((occ.step(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_on_cycle_is_point_mass_path() {
        let env = MdpSpec::Tabular(TabularMdp::cycle(3, 2, 0.9).unwrap());
        let pol = Policy::softmax(ParamVec::zeros(6), FeatureTable::one_hot(3, 2), 0.0).unwrap();
        let occ = occupancy_enumerate(&env, &pol, 5).unwrap();
        for i in 0..5 {
            let mass: f64 = (0..2).map(|a| occ.get(i, i % 3, a)).sum();
            assert!((mass - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn estimators_are_deterministic_given_stream() {
        let env = MdpSpec::chain(2, 0.1, 0.8).unwrap();
        let pol = Policy::softmax(ParamVec::new(vec![0.3, -0.2, 0.1, 0.4]).unwrap(), FeatureTable::one_hot(2, 2), 0.02).unwrap();
        let reference = pol.reference();
        let rew = RewardModel::new(
            ParamVec::new(vec![0.5, -0.5, 1.0, 0.2]).unwrap(),
            RewardFeatures::Table(FeatureTable::one_hot(2, 2)),
            0.2,
            Squash::Logistic,
        )
        .unwrap();
        let ctx = RlContext { env: &env, policy: &pol, policy_ref: &reference, reward: &rew };
        let a = grad_lambda_j(&ctx, 40, 30, 20, &RngStream::new(3, 4)).unwrap();
        let b = grad_lambda_j(&ctx, 40, 30, 20, &RngStream::new(3, 4)).unwrap();
        assert_eq!(a, b);
        assert!(grad_lambda_j(&ctx, 0, 30, 20, &RngStream::new(3, 4)).is_err());
    }
}
