//! Discounted MDPs, parameterized policies and reward heads, trajectory
//! sampling, and exact policy evaluation for finite environments.
//!
//! Two environment families are built in: finite tabular MDPs (with the
//! `chain-K` constructor used by every brute-force oracle) and `lq1d`, a
//! one-dimensional continuous-state system with linear dynamics clipped to a
//! bounded box.

mod exact;
mod features;
mod policy;
mod reward;
mod trajectory;

pub use exact::{
    discounted_occupancy, exact_discounted_return, exact_q, exact_q_table, exact_value_table,
    policy_table, regularized_reward_table,
};
pub use features::FeatureTable;
pub use policy::{Policy, PolicyKind};
pub use reward::{RewardFeatures, RewardModel, Squash};
pub use trajectory::{rollout_segment, sample_trajectory, Segment, Trajectory};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// A state of either a finite or a one-dimensional continuous space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum State {
    Discrete(usize),
    Continuous(f64),
}

/// An action of either a finite or a continuous action space.
///
/// Continuous actions keep the raw policy sample; environments clip it to
/// their action interval when applying it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(f64),
}

impl State {
    pub fn index(&self) -> Result<usize> {
        match *self {
            State::Discrete(s) => Ok(s),
            State::Continuous(_) => Err(Error::unsupported("continuous state used as a table index")),
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            State::Discrete(s) => s as f64,
            State::Continuous(x) => x,
        }
    }
}

impl Action {
    pub fn index(&self) -> Result<usize> {
        match *self {
            Action::Discrete(a) => Ok(a),
            Action::Continuous(_) => Err(Error::unsupported("continuous action used as a table index")),
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Action::Discrete(a) => a as f64,
            Action::Continuous(x) => x,
        }
    }
}

/// Finite MDP with an exact transition kernel and initial distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `[s][a][s']`
    transition: Vec<f64>,
    init: Vec<f64>,
    gamma: f64,
}

const STOCHASTIC_TOL: f64 = 1e-12;

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        init: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("tabular MDP needs at least one state and one action"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {gamma}")));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch {
                expected: n_states * n_actions * n_states,
                got: transition.len(),
            });
        }
        if init.len() != n_states {
            return Err(Error::DimensionMismatch { expected: n_states, got: init.len() });
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, &format!("transition row {row_idx}"))?;
        }
        check_distribution(&init, "initial distribution")?;
        Ok(TabularMdp { n_states, n_actions, transition, init, gamma })
    }

    /// `chain-K`: action 1 moves right, action 0 moves left, each succeeding
    /// with probability `1 - slip` (otherwise the agent stays put). Ends clamp.
    /// Starts uniformly.
    pub fn chain(k: usize, slip: f64, gamma: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("chain needs at least one state"));
        }
        if !(0.0..=1.0).contains(&slip) {
            return Err(Error::invalid(format!("slip must lie in [0, 1], got {slip}")));
        }
        let mut transition = vec![0.0; k * 2 * k];
        for s in 0..k {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(k - 1);
            for (a, target) in [(0usize, left), (1usize, right)] {
                let row = &mut transition[(s * 2 + a) * k..(s * 2 + a + 1) * k];
                row[target] += 1.0 - slip;
                row[s] += slip;
            }
        }
        TabularMdp::new(k, 2, transition, vec![1.0 / k as f64; k], gamma)
    }

    /// Deterministic cycle `0 → 1 → … → k-1 → 0` regardless of the action,
    /// started in state 0.
    pub fn cycle(k: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("cycle needs at least one state"));
        }
        let mut transition = vec![0.0; k * n_actions * k];
        for s in 0..k {
            for a in 0..n_actions {
                transition[(s * n_actions + a) * k + (s + 1) % k] = 1.0;
            }
        }
        let mut init = vec![0.0; k];
        init[0] = 1.0;
        TabularMdp::new(k, n_actions, transition, init, gamma)
    }

    /// Random kernel and initial distribution drawn from `rng`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut RngStream) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let init = random_simplex(n_states, rng);
        TabularMdp::new(n_states, n_actions, transition, init, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    /// `P(· | s, a)`.
    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        TabularMdp::new(self.n_states, self.n_actions, self.transition.clone(), self.init.clone(), gamma)
    }

    /// Applies a consistent relabeling of states and actions.
    pub fn relabeled(&self, state_perm: &[usize], action_perm: &[usize]) -> Self {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut transition = vec![0.0; self.transition.len()];
        let mut init = vec![0.0; ns];
        for s in 0..ns {
            init[state_perm[s]] = self.init[s];
            for a in 0..na {
                for s2 in 0..ns {
                    transition[(state_perm[s] * na + action_perm[a]) * ns + state_perm[s2]] =
                        self.transition[(s * na + a) * ns + s2];
                }
            }
        }
        TabularMdp { transition, init, ..self.clone() }
    }

    fn sample_next(&self, s: usize, a: usize, rng: &mut RngStream) -> usize {
        sample_categorical(self.next_distribution(s, a), rng.uniform())
    }
}

/// One-dimensional continuous-state system: `s' = clip(s + drift·clip(a) + noise·ξ)`,
/// with states in `[-state_bound, state_bound]` and actions clipped to
/// `[-action_bound, action_bound]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lq1d {
    pub gamma: f64,
    pub drift: f64,
    pub noise_std: f64,
    pub state_bound: f64,
    pub action_bound: f64,
    /// Initial states are uniform on `[-init_half_width, init_half_width]`.
    pub init_half_width: f64,
}

impl Lq1d {
    pub fn new(gamma: f64) -> Result<Self> {
        let env = Lq1d {
            gamma,
            drift: 0.3,
            noise_std: 0.05,
            state_bound: 1.0,
            action_bound: 1.0,
            init_half_width: 0.5,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.state_bound > 0.0 && self.action_bound > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::invalid("lq1d bounds must be positive and noise non-negative"));
        }
        if !(0.0..=self.state_bound).contains(&self.init_half_width) {
            return Err(Error::invalid("lq1d initial width must lie inside the state box"));
        }
        Ok(())
    }

    pub fn clip_action(&self, a: f64) -> f64 {
        a.clamp(-self.action_bound, self.action_bound)
    }
}

/// A discounted MDP: either finite and exactly solvable, or continuous.
#[derive(Clone, Debug, PartialEq)]
pub enum MdpSpec {
    Tabular(TabularMdp),
    Lq1d(Lq1d),
}

impl MdpSpec {
    /// The `chain-K` environment.
    pub fn chain(k: usize, slip: f64, gamma: f64) -> Result<Self> {
        Ok(MdpSpec::Tabular(TabularMdp::chain(k, slip, gamma)?))
    }

    pub fn lq1d(gamma: f64) -> Result<Self> {
        Ok(MdpSpec::Lq1d(Lq1d::new(gamma)?))
    }

    pub fn gamma(&self) -> f64 {
        match self {
            MdpSpec::Tabular(t) => t.gamma,
            MdpSpec::Lq1d(l) => l.gamma,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, MdpSpec::Tabular(_))
    }

    pub fn tabular(&self) -> Result<&TabularMdp> {
        match self {
            MdpSpec::Tabular(t) => Ok(t),
            MdpSpec::Lq1d(_) => Err(Error::unsupported("exact computation requires a finite environment")),
        }
    }

    pub fn contains(&self, s: &State) -> bool {
        match (self, s) {
            (MdpSpec::Tabular(t), State::Discrete(i)) => *i < t.n_states,
            (MdpSpec::Lq1d(l), State::Continuous(x)) => x.is_finite() && x.abs() <= l.state_bound,
            _ => false,
        }
    }

    pub fn sample_initial(&self, rng: &mut RngStream) -> State {
        match self {
            MdpSpec::Tabular(t) => State::Discrete(sample_categorical(&t.init, rng.uniform())),
            MdpSpec::Lq1d(l) => State::Continuous((2.0 * rng.uniform() - 1.0) * l.init_half_width),
        }
    }

    /// Draws `s' ~ P(· | s, a)`, failing if the result leaves the state space.
    pub fn sample_next(&self, s: &State, a: &Action, rng: &mut RngStream) -> Result<State> {
        let next = match (self, s, a) {
            (MdpSpec::Tabular(t), State::Discrete(si), Action::Discrete(ai)) => {
                if *si >= t.n_states || *ai >= t.n_actions {
                    return Err(Error::OutOfSpace(format!("({si}, {ai})")));
                }
                State::Discrete(t.sample_next(*si, *ai, rng))
            }
            (MdpSpec::Lq1d(l), State::Continuous(x), Action::Continuous(u)) => {
                let z: f64 = StandardNormal.sample(rng);
                let raw = x + l.drift * l.clip_action(*u) + l.noise_std * z;
                State::Continuous(raw.clamp(-l.state_bound, l.state_bound))
            }
            _ => return Err(Error::invalid("state/action kind does not match the environment")),
        };
        if !self.contains(&next) {
            return Err(Error::OutOfSpace(format!("{next:?}")));
        }
        Ok(next)
    }
}

pub(crate) fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn random_simplex(n: usize, rng: &mut RngStream) -> Vec<f64> {
    // Exponential spacings give a uniform point on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let drift: f64 = 1.0 - p.iter().sum::<f64>();
    p[0] += drift;
    p
}
