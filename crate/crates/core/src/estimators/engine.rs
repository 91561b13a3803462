use crate::error::Result;
use crate::mdp_env::{sample_categorical, Action, MdpSpec, Policy, RewardModel, State, TabularMdp};
use crate::rng::RngStream;

/// Rollout machinery shared by the estimators. Finite environments get every
/// per-(s, a) quantity tabulated once per call; continuous ones evaluate the
/// policy and reward on the fly.
pub(crate) enum Engine<'a> {
    Table(TableEngine<'a>),
    Generic(GenericEngine<'a>),
}

pub(crate) struct TableEngine<'a> {
    env: &'a TabularMdp,
    na: usize,
    pi: Vec<f64>,
    kl: Vec<f64>,
    base: Vec<f64>,
    beta: f64,
    lambda_dim: usize,
    phi_dim: usize,
    /// `[s][a][k]`, empty unless requested through [`Tables`].
    score: Vec<f64>,
    reward_grad: Vec<f64>,
}

pub(crate) struct GenericEngine<'a> {
    env: &'a MdpSpec,
    policy: &'a Policy,
    policy_ref: &'a Policy,
    reward: &'a RewardModel,
}

/// Which per-(s, a) gradient tables a finite-environment engine should build.
#[derive(Clone, Copy, Default)]
pub(crate) struct Tables {
    pub score: bool,
    pub reward_grad: bool,
}

impl<'a> Engine<'a> {
    pub fn new(
        env: &'a MdpSpec,
        policy: &'a Policy,
        policy_ref: &'a Policy,
        reward: &'a RewardModel,
        tables: Tables,
    ) -> Result<Self> {
        let MdpSpec::Tabular(t) = env else {
            return Ok(Engine::Generic(GenericEngine { env, policy, policy_ref, reward }));
        };
        let (ns, na) = (t.n_states(), t.n_actions());
        let pi = crate::mdp_env::policy_table(env, policy)?;
        let pi_ref = crate::mdp_env::policy_table(env, policy_ref)?;
        let mut kl = vec![0.0; ns * na];
        let mut base = vec![0.0; ns * na];
        let (ld, pd) = (policy.dim(), reward.dim());
        let mut score = Vec::new();
        let mut reward_grad = Vec::new();
        if tables.score {
            score = vec![0.0; ns * na * ld];
        }
        if tables.reward_grad {
            reward_grad = vec![0.0; ns * na * pd];
        }
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                let (st, at) = (State::Discrete(s), Action::Discrete(a));
                if reward.beta() != 0.0 {
                    kl[i] = pi[i].ln() - pi_ref[i].ln();
                }
                base[i] = reward.base_reward(&st, &at)?;
                if tables.score {
                    policy.add_grad_log_prob(&st, &at, 1.0, &mut score[i * ld..(i + 1) * ld])?;
                }
                if tables.reward_grad {
                    reward.add_reward_grad(&st, &at, 1.0, &mut reward_grad[i * pd..(i + 1) * pd])?;
                }
            }
        }
        Ok(Engine::Table(TableEngine {
            env: t,
            na,
            pi,
            kl,
            base,
            beta: reward.beta(),
            lambda_dim: ld,
            phi_dim: pd,
            score,
            reward_grad,
        }))
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Engine::Table(e) => e.env.gamma(),
            Engine::Generic(e) => e.env.gamma(),
        }
    }

    pub fn initial(&self, rng: &mut RngStream) -> State {
        match self {
            Engine::Table(e) => State::Discrete(sample_categorical(e.env.init(), rng.uniform())),
            Engine::Generic(e) => e.env.sample_initial(rng),
        }
    }

    pub fn action(&self, s: &State, rng: &mut RngStream) -> Result<Action> {
        match self {
            Engine::Table(e) => {
                let si = s.index()?;
                let row = &e.pi[si * e.na..(si + 1) * e.na];
                Ok(Action::Discrete(sample_categorical(row, rng.uniform())))
            }
            Engine::Generic(e) => e.policy.sample_action(s, rng),
        }
    }

    pub fn next(&self, s: &State, a: &Action, rng: &mut RngStream) -> Result<State> {
        match self {
            Engine::Table(e) => {
                let dist = e.env.next_distribution(s.index()?, a.index()?);
                Ok(State::Discrete(sample_categorical(dist, rng.uniform())))
            }
            Engine::Generic(e) => e.env.sample_next(s, a, rng),
        }
    }

    /// `(r_φ(s, a), h(s, a))`.
    pub fn reward_and_kl(&self, s: &State, a: &Action) -> Result<(f64, f64)> {
        match self {
            Engine::Table(e) => {
                let i = s.index()? * e.na + a.index()?;
                Ok((e.base[i], e.kl[i]))
            }
            Engine::Generic(e) => {
                let r = e.reward.base_reward(s, a)?;
                let h = if e.reward.beta() == 0.0 {
                    0.0
                } else {
                    e.policy.log_prob(s, a)? - e.policy_ref.log_prob(s, a)?
                };
                Ok((r, h))
            }
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Engine::Table(e) => e.beta,
            Engine::Generic(e) => e.reward.beta(),
        }
    }

    /// Adds `w · ∇λ log π(a|s)` to `out`.
    pub fn add_score(&self, s: &State, a: &Action, w: f64, out: &mut [f64]) -> Result<()> {
        match self {
            Engine::Table(e) => {
                let i = s.index()? * e.na + a.index()?;
                let ld = e.lambda_dim;
                for (o, g) in out.iter_mut().zip(&e.score[i * ld..(i + 1) * ld]) {
                    *o += w * g;
                }
                Ok(())
            }
            Engine::Generic(e) => e.policy.add_grad_log_prob(s, a, w, out),
        }
    }

    /// Adds `w · ∇φ r_φ(s, a)` to `out`.
    pub fn add_reward_grad(&self, s: &State, a: &Action, w: f64, out: &mut [f64]) -> Result<()> {
        match self {
            Engine::Table(e) => {
                let i = s.index()? * e.na + a.index()?;
                let pd = e.phi_dim;
                for (o, g) in out.iter_mut().zip(&e.reward_grad[i * pd..(i + 1) * pd]) {
                    *o += w * g;
                }
                Ok(())
            }
            Engine::Generic(e) => e.reward.add_reward_grad(s, a, w, out),
        }
    }

    /// Truncated discounted return `Σ_{t<H} γ^t (r + β h)` of one rollout,
    /// optionally started from a fixed `(s, a)`.
    pub fn rollout_return(&self, start: Option<(State, Action)>, horizon: usize, rng: &mut RngStream) -> Result<f64> {
        let gamma = self.gamma();
        let beta = self.beta();
        let (mut s, mut forced) = match start {
            Some((s, a)) => (s, Some(a)),
            None => (self.initial(rng), None),
        };
        let mut disc = 1.0;
        let mut total = 0.0;
        for t in 0..horizon {
            let a = match forced.take() {
                Some(a) => a,
                None => self.action(&s, rng)?,
            };
            let (r, h) = self.reward_and_kl(&s, &a)?;
            total += disc * (r + beta * h);
            disc *= gamma;
            if t + 1 < horizon {
                s = self.next(&s, &a, rng)?;
            }
        }
        Ok(total)
    }
}
