use super::policy::Policy;
use super::reward::RewardModel;
use super::{Action, MdpSpec, State};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// State-action sequence of a rollout, without reward bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (&State, &Action)> {
        self.states.iter().zip(&self.actions)
    }
}

/// Horizon-`H` rollout with per-step base rewards and KL terms
/// `h(s, a) = log π(a|s) − log π_ref(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub segment: Segment,
    pub rewards: Vec<f64>,
    pub kl_terms: Vec<f64>,
    pub gamma: f64,
}

impl Trajectory {
    /// Scores an existing segment.
    pub fn from_segment(
        segment: Segment,
        policy: &Policy,
        policy_ref: &Policy,
        reward: &RewardModel,
        gamma: f64,
    ) -> Result<Self> {
        let mut rewards = Vec::with_capacity(segment.len());
        let mut kl_terms = Vec::with_capacity(segment.len());
        for (s, a) in segment.steps() {
            rewards.push(reward.base_reward(s, a)?);
            let h = policy.log_prob(s, a)? - policy_ref.log_prob(s, a)?;
            if !h.is_finite() {
                return Err(Error::NonFinite("KL term".into()));
            }
            kl_terms.push(h);
        }
        Ok(Trajectory { segment, rewards, kl_terms, gamma })
    }

    pub fn horizon(&self) -> usize {
        self.segment.len()
    }

    /// `Σ_i γ^{i-1} (r_i + β h_i)`.
    pub fn discounted_return(&self, beta: f64) -> f64 {
        let mut g = 1.0;
        let mut total = 0.0;
        for (r, h) in self.rewards.iter().zip(&self.kl_terms) {
            total += g * (r + beta * h);
            g *= self.gamma;
        }
        total
    }

    /// Undiscounted sum of base rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rolls out `policy` for `horizon` steps. `start` fixes the first state and,
/// optionally, the first action; otherwise `s_1 ~ ν`.
pub fn rollout_segment(
    env: &MdpSpec,
    policy: &Policy,
    horizon: usize,
    start: Option<(State, Option<Action>)>,
    rng: &mut RngStream,
) -> Result<Segment> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let (mut s, mut forced) = match start {
        Some((s, a)) => {
            if !env.contains(&s) {
                return Err(Error::OutOfSpace(format!("{s:?}")));
            }
            (s, a)
        }
        None => (env.sample_initial(rng), None),
    };
    for i in 0..horizon {
        let a = match forced.take() {
            Some(a) => a,
            None => policy.sample_action(&s, rng)?,
        };
        states.push(s);
        actions.push(a);
        if i + 1 < horizon {
            s = env.sample_next(&s, &a, rng)?;
        }
    }
    Ok(Segment { states, actions })
}

/// Samples `s_1 ~ ν`, `a_i ~ π_λ(·|s_i)`, `s_{i+1} ~ P(·|s_i, a_i)` for `horizon`
/// steps and scores the result.
pub fn sample_trajectory(
    env: &MdpSpec,
    policy: &Policy,
    policy_ref: &Policy,
    reward: &RewardModel,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let segment = rollout_segment(env, policy, horizon, None, rng)?;
    Trajectory::from_segment(segment, policy, policy_ref, reward, env.gamma())
}
