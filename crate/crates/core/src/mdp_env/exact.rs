use nalgebra::{DMatrix, DVector};

use super::policy::Policy;
use super::reward::RewardModel;
use super::{Action, MdpSpec, State, TabularMdp};
use crate::error::{Error, Result};

/// `π(a|s)` laid out as `[s][a]`.
pub fn policy_table(env: &MdpSpec, policy: &Policy) -> Result<Vec<f64>> {
    let t = env.tabular()?;
    check_policy(t, policy)?;
    let na = t.n_actions();
    let mut out = vec![0.0; t.n_states() * na];
    for s in 0..t.n_states() {
        policy.probs_into(s, &mut out[s * na..(s + 1) * na]);
    }
    Ok(out)
}

/// `r_φ(s, a) + β·h(s, a)` laid out as `[s][a]`.
pub fn regularized_reward_table(
    env: &MdpSpec,
    policy: &Policy,
    policy_ref: &Policy,
    reward: &RewardModel,
) -> Result<Vec<f64>> {
    let t = env.tabular()?;
    let pi = policy_table(env, policy)?;
    let pi_ref = policy_table(env, policy_ref)?;
    let na = t.n_actions();
    let mut out = vec![0.0; t.n_states() * na];
    for s in 0..t.n_states() {
        for a in 0..na {
            let i = s * na + a;
            let r = reward.base_reward(&State::Discrete(s), &Action::Discrete(a))?;
            out[i] = if reward.beta() == 0.0 { r } else { r + reward.beta() * (pi[i].ln() - pi_ref[i].ln()) };
        }
    }
    Ok(out)
}

/// `V^π(s)` by solving `(I − γ P_π) V = R_π`.
pub fn exact_value_table(
    env: &MdpSpec,
    policy: &Policy,
    policy_ref: &Policy,
    reward: &RewardModel,
) -> Result<Vec<f64>> {
    let t = env.tabular()?;
    let pi = policy_table(env, policy)?;
    let r = regularized_reward_table(env, policy, policy_ref, reward)?;
    let (ns, na) = (t.n_states(), t.n_actions());
    let mut m = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let p = pi[s * na + a];
            rhs[s] += p * r[s * na + a];
            for (s2, q) in t.next_distribution(s, a).iter().enumerate() {
                m[(s, s2)] -= t.gamma() * p * q;
            }
        }
    }
    let v = m.lu().solve(&rhs).ok_or_else(|| Error::NonFinite("singular Bellman system".into()))?;
    Ok(v.iter().copied().collect())
}

/// `Q^π(s, a) = R(s, a) + γ Σ_{s'} P(s'|s, a) V^π(s')` laid out as `[s][a]`.
pub fn exact_q_table(env: &MdpSpec, policy: &Policy, policy_ref: &Policy, reward: &RewardModel) -> Result<Vec<f64>> {
    let t = env.tabular()?;
    let v = exact_value_table(env, policy, policy_ref, reward)?;
    let mut q = regularized_reward_table(env, policy, policy_ref, reward)?;
    let na = t.n_actions();
    for s in 0..t.n_states() {
        for a in 0..na {
            let ev: f64 = t.next_distribution(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            q[s * na + a] += t.gamma() * ev;
        }
    }
    Ok(q)
}

/// `Q^π(s, a)` on the regularized reward.
pub fn exact_q(
    env: &MdpSpec,
    policy: &Policy,
    policy_ref: &Policy,
    reward: &RewardModel,
    s: usize,
    a: usize,
) -> Result<f64> {
    let t = env.tabular()?;
    if s >= t.n_states() || a >= t.n_actions() {
        return Err(Error::OutOfSpace(format!("({s}, {a})")));
    }
    Ok(exact_q_table(env, policy, policy_ref, reward)?[s * t.n_actions() + a])
}

/// `J = Σ_s ν(s) V^π(s)`, including the β·KL contribution.
pub fn exact_discounted_return(
    env: &MdpSpec,
    policy: &Policy,
    policy_ref: &Policy,
    reward: &RewardModel,
) -> Result<f64> {
    let t = env.tabular()?;
    let v = exact_value_table(env, policy, policy_ref, reward)?;
    Ok(t.init().iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Normalized discounted occupancy `d(s, a) = (1−γ) Σ_t γ^t Pr(s_t = s, a_t = a)`
/// laid out as `[s][a]`; sums to one.
pub fn discounted_occupancy(env: &MdpSpec, policy: &Policy) -> Result<Vec<f64>> {
    let t = env.tabular()?;
    let pi = policy_table(env, policy)?;
    let (ns, na) = (t.n_states(), t.n_actions());
    // (I − γ P_πᵀ) d_s = (1−γ) ν
    let mut m = DMatrix::<f64>::identity(ns, ns);
    for s in 0..ns {
        for a in 0..na {
            let p = pi[s * na + a];
            for (s2, q) in t.next_distribution(s, a).iter().enumerate() {
                m[(s2, s)] -= t.gamma() * p * q;
            }
        }
    }
    let rhs = DVector::from_iterator(ns, t.init().iter().map(|v| (1.0 - t.gamma()) * v));
    let d = m.lu().solve(&rhs).ok_or_else(|| Error::NonFinite("singular occupancy system".into()))?;
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            out[s * na + a] = d[s] * pi[s * na + a];
        }
    }
    Ok(out)
}

fn check_policy(t: &TabularMdp, policy: &Policy) -> Result<()> {
    match policy.n_actions() {
        Some(na) if na == t.n_actions() => Ok(()),
        Some(na) => Err(Error::DimensionMismatch { expected: t.n_actions(), got: na }),
        None => Err(Error::invalid("finite environment needs a finite-action policy")),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{FeatureTable, RewardFeatures, Squash};
    use super::*;
    use crate::param::ParamVec;
    use crate::rng::RngStream;

    fn logit(c: f64) -> f64 {
        (c / (1.0 - c)).ln()
    }

    fn instance(env: TabularMdp, lambda: Vec<f64>, phi: Vec<f64>, beta: f64) -> (MdpSpec, Policy, RewardModel) {
        let (ns, na) = (env.n_states(), env.n_actions());
        let policy = Policy::softmax(ParamVec::new(lambda).unwrap(), FeatureTable::one_hot(ns, na), 0.01).unwrap();
        let reward = RewardModel::new(
            ParamVec::new(phi).unwrap(),
            RewardFeatures::Table(FeatureTable::one_hot(ns, na)),
            beta,
            Squash::Logistic,
        )
        .unwrap();
        (MdpSpec::Tabular(env), policy, reward)
    }

    /// Iterates the Bellman operator until the sup-norm change drops below `tol`.
    fn value_iteration_return(env: &MdpSpec, policy: &Policy, policy_ref: &Policy, reward: &RewardModel, tol: f64) -> f64 {
        let t = env.tabular().unwrap();
        let (ns, na) = (t.n_states(), t.n_actions());
        let r = regularized_reward_table(env, policy, policy_ref, reward).unwrap();
        let pi = policy_table(env, policy).unwrap();
        let mut v = vec![0.0; ns];
        loop {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let ev: f64 = t.next_distribution(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                    next[s] += pi[s * na + a] * (r[s * na + a] + t.gamma() * ev);
                }
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < tol {
                break;
            }
        }
        t.init().iter().zip(&v).map(|(p, v)| p * v).sum()
    }

    #[test]
    fn constant_reward_geometric_series() {
        let c = 0.3;
        let (env, pol, rew) = instance(TabularMdp::cycle(1, 1, 0.9).unwrap(), vec![0.0], vec![logit(c)], 0.0);
        let j = exact_discounted_return(&env, &pol, &pol.reference(), &rew).unwrap();
        assert!((j - c / 0.1).abs() < 1e-12);
        let q = exact_q(&env, &pol, &pol.reference(), &rew, 0, 0).unwrap();
        assert!((q - c / 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_gives_zero_return() {
        let env = MdpSpec::chain(3, 0.1, 0.9).unwrap();
        let pol = Policy::softmax(ParamVec::filled(6, 0.4).unwrap(), FeatureTable::one_hot(3, 2), 0.0).unwrap();
        let rew = RewardModel::new(
            ParamVec::filled(6, -3.0).unwrap(),
            RewardFeatures::Table(FeatureTable::one_hot(3, 2)),
            0.0,
            Squash::Clamp01,
        )
        .unwrap();
        assert_eq!(exact_discounted_return(&env, &pol, &pol.reference(), &rew).unwrap(), 0.0);
    }

    #[test]
    fn matches_value_iteration_on_random_instances() {
        let mut rng = RngStream::new(21, 0);
        for trial in 0..10 {
            let env = TabularMdp::random(2, 2, 0.9, &mut rng).unwrap();
            let lambda: Vec<f64> = (0..4).map(|_| 4.0 * rng.uniform() - 2.0).collect();
            let phi: Vec<f64> = (0..4).map(|_| 4.0 * rng.uniform() - 2.0).collect();
            let beta = if trial % 2 == 0 { 0.0 } else { 0.3 };
            let (env, pol, rew) = instance(env, lambda, phi, beta);
            let exact = exact_discounted_return(&env, &pol, &pol.reference(), &rew).unwrap();
            let vi = value_iteration_return(&env, &pol, &pol.reference(), &rew, 1e-13);
            assert!((exact - vi).abs() <= 1e-10, "{exact} vs {vi}");
        }
    }

    #[test]
    fn one_step_q_when_discount_tiny() {
        let (env, pol, rew) = instance(TabularMdp::chain(2, 0.3, 0.5).unwrap(), vec![1.0, -0.5, 0.2, 0.9], vec![0.1, 0.7, -0.4, 1.2], 0.2);
        let MdpSpec::Tabular(t) = &env else { unreachable!() };
        let env0 = MdpSpec::Tabular(t.with_gamma(1e-300).unwrap());
        let q = exact_q_table(&env0, &pol, &pol.reference(), &rew).unwrap();
        let r = regularized_reward_table(&env0, &pol, &pol.reference(), &rew).unwrap();
        for (a, b) in q.iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn continuous_env_is_unsupported() {
        let env = MdpSpec::lq1d(0.9).unwrap();
        let pol = Policy::gaussian(ParamVec::zeros(2), 0.3).unwrap();
        let rew = RewardModel::new(ParamVec::zeros(4), RewardFeatures::Polynomial1d { action_bound: 1.0 }, 0.0, Squash::Logistic)
            .unwrap();
        assert!(matches!(exact_discounted_return(&env, &pol, &pol, &rew), Err(Error::Unsupported(_))));
        assert!(matches!(exact_q(&env, &pol, &pol, &rew, 0, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn occupancy_is_normalized() {
        let (env, pol, _) = instance(TabularMdp::chain(4, 0.2, 0.95).unwrap(), vec![0.3; 8], vec![0.0; 8], 0.0);
        let d = discounted_occupancy(&env, &pol).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn return_is_invariant_under_relabeling() {
        let mut rng = RngStream::new(5, 1);
        let base = TabularMdp::random(3, 2, 0.85, &mut rng).unwrap();
        let lambda = vec![0.5, -1.0, 0.3, 0.0, 1.2, -0.4];
        let phi = vec![0.2, -0.6, 1.1, 0.4, -0.9, 0.0];
        let (env, pol, rew) = instance(base.clone(), lambda.clone(), phi.clone(), 0.25);
        let j = exact_discounted_return(&env, &pol, &pol.reference(), &rew).unwrap();

        let sp = [2usize, 0, 1];
        let ap = [1usize, 0];
        let env2 = MdpSpec::Tabular(base.relabeled(&sp, &ap));
        // One-hot tables permute into permuted one-hot tables, so parameters move with them.
        let mut lam2 = vec![0.0; 6];
        let mut phi2 = vec![0.0; 6];
        for s in 0..3 {
            for a in 0..2 {
                lam2[sp[s] * 2 + ap[a]] = lambda[s * 2 + a];
                phi2[sp[s] * 2 + ap[a]] = phi[s * 2 + a];
            }
        }
        let pol2 = Policy::softmax(ParamVec::new(lam2).unwrap(), FeatureTable::one_hot(3, 2), 0.01).unwrap();
        let rew2 = rew.with_phi(ParamVec::new(phi2).unwrap()).unwrap();
        let j2 = exact_discounted_return(&env2, &pol2, &pol2.reference(), &rew2).unwrap();
        assert!((j - j2).abs() < 1e-12, "{j} vs {j2}");
    }

    #[test]
    fn scaling_rewards_scales_return() {
        let env = MdpSpec::chain(3, 0.1, 0.9).unwrap();
        let pol = Policy::softmax(ParamVec::new(vec![0.2, -0.1, 0.5, 0.3, -0.7, 0.1]).unwrap(), FeatureTable::one_hot(3, 2), 0.0)
            .unwrap();
        let scalar = |c: f64| {
            RewardModel::new(
                ParamVec::new(vec![1.0]).unwrap(),
                RewardFeatures::Table(FeatureTable::scalar(3, 2, vec![0.1 * c, 0.2 * c, 0.05 * c, 0.3 * c, 0.15 * c, 0.25 * c]).unwrap()),
                0.0,
                Squash::Clamp01,
            )
            .unwrap()
        };
        let j1 = exact_discounted_return(&env, &pol, &pol.reference(), &scalar(1.0)).unwrap();
        let j3 = exact_discounted_return(&env, &pol, &pol.reference(), &scalar(3.0)).unwrap();
        assert!((j3 - 3.0 * j1).abs() < 1e-12);
    }
}
