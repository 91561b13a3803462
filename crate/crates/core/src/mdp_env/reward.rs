use serde::{Deserialize, Serialize};

use super::features::{dot, FeatureTable};
use super::{Action, State};
use crate::error::{Error, Result};
use crate::param::ParamVec;

/// Monotone map from the linear score `φᵀψ` to a base reward in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    /// `1 / (1 + e^{-z})`
    Logistic,
    /// `min(max(z, 0), 1)`
    Clamp01,
}

impl Squash {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Squash::Logistic => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Squash::Clamp01 => z.clamp(0.0, 1.0),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Squash::Logistic => {
                let p = self.apply(z);
                p * (1.0 - p)
            }
            Squash::Clamp01 => {
                if z > 0.0 && z < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Reward feature map `ψ(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardFeatures {
    /// Finite states and actions.
    Table(FeatureTable),
    /// Continuous scalar state and action: `[s², a², s·a, 1]` with the action
    /// clipped to `[-action_bound, action_bound]`.
    Polynomial1d { action_bound: f64 },
}

impl RewardFeatures {
    pub fn dim(&self) -> usize {
        match self {
            RewardFeatures::Table(t) => t.dim(),
            RewardFeatures::Polynomial1d { .. } => 4,
        }
    }

    fn with_features<T>(&self, s: &State, a: &Action, f: impl FnOnce(&[f64]) -> T) -> Result<T> {
        match (self, s, a) {
            (RewardFeatures::Table(t), State::Discrete(si), Action::Discrete(ai)) => {
                if *si >= t.n_states() || *ai >= t.n_actions() {
                    return Err(Error::OutOfSpace(format!("({si}, {ai})")));
                }
                Ok(f(t.get(*si, *ai)))
            }
            (RewardFeatures::Polynomial1d { action_bound }, State::Continuous(x), Action::Continuous(u)) => {
                let u = u.clamp(-action_bound, *action_bound);
                Ok(f(&[x * x, u * u, x * u, 1.0]))
            }
            _ => Err(Error::invalid("state/action kind does not match the reward features")),
        }
    }
}

/// Parameterized reward head `r_φ(s, a) = squash(φᵀψ(s, a))` with KL weight β.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    phi: ParamVec,
    features: RewardFeatures,
    beta: f64,
    squash: Squash,
}

impl RewardModel {
    pub fn new(phi: ParamVec, features: RewardFeatures, beta: f64, squash: Squash) -> Result<Self> {
        if phi.dim() != features.dim() {
            return Err(Error::DimensionMismatch { expected: features.dim(), got: phi.dim() });
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("KL weight must be non-negative, got {beta}")));
        }
        Ok(RewardModel { phi, features, beta, squash })
    }

    pub fn with_phi(&self, phi: ParamVec) -> Result<Self> {
        RewardModel::new(phi, self.features.clone(), self.beta, self.squash)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        RewardModel::new(self.phi.clone(), self.features.clone(), beta, self.squash)
    }

    pub fn phi(&self) -> &ParamVec {
        &self.phi
    }

    pub fn features(&self) -> &RewardFeatures {
        &self.features
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    /// Base reward `r_φ(s, a) ∈ [0, 1]`.
    pub fn base_reward(&self, s: &State, a: &Action) -> Result<f64> {
        let phi = self.phi.as_slice();
        self.features.with_features(s, a, |psi| self.squash.apply(dot(phi, psi)))
    }

    /// Adds `weight · ∇φ r_φ(s, a)` to `out`.
    pub fn add_reward_grad(&self, s: &State, a: &Action, weight: f64, out: &mut [f64]) -> Result<()> {
        let phi = self.phi.as_slice();
        self.features.with_features(s, a, |psi| {
            let c = weight * self.squash.derivative(dot(phi, psi));
            if c != 0.0 {
                for (o, p) in out.iter_mut().zip(psi) {
                    *o += c * p;
                }
            }
        })
    }

    pub fn reward_grad(&self, s: &State, a: &Action) -> Result<ParamVec> {
        let mut out = vec![0.0; self.dim()];
        self.add_reward_grad(s, a, 1.0, &mut out)?;
        ParamVec::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(Squash::Logistic.apply(0.0), 0.5);
        assert!(Squash::Logistic.apply(-800.0) >= 0.0);
        assert!(Squash::Logistic.apply(800.0) <= 1.0);
        assert!(Squash::Logistic.derivative(800.0).is_finite());
    }

    #[test]
    fn reward_grad_matches_finite_differences() {
        let feats = FeatureTable::new(2, 2, 3, vec![0.5, -1.0, 0.2, 1.0, 0.0, -0.3, 0.7, 0.7, 0.1, -0.2, 1.5, 0.4])
            .unwrap();
        let phi = vec![0.3, -0.8, 1.1];
        let model = RewardModel::new(ParamVec::new(phi.clone()).unwrap(), RewardFeatures::Table(feats), 0.0, Squash::Logistic)
            .unwrap();
        let (s, a) = (State::Discrete(1), Action::Discrete(0));
        let g = model.reward_grad(&s, &a).unwrap();
        for k in 0..3 {
            let eps = 1e-6;
            let mut up = phi.clone();
            up[k] += eps;
            let mut dn = phi.clone();
            dn[k] -= eps;
            let r = |v: Vec<f64>| model.with_phi(ParamVec::new(v).unwrap()).unwrap().base_reward(&s, &a).unwrap();
            assert!(((r(up) - r(dn)) / (2.0 * eps) - g.get(k)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn base_reward_in_unit_interval(phi in prop::collection::vec(-50.0f64..50.0, 4), x in -1.0f64..1.0, u in -5.0f64..5.0) {
            for squash in [Squash::Logistic, Squash::Clamp01] {
                let m = RewardModel::new(
                    ParamVec::new(phi.clone()).unwrap(),
                    RewardFeatures::Polynomial1d { action_bound: 1.0 },
                    0.0,
                    squash,
                ).unwrap();
                let r = m.base_reward(&State::Continuous(x), &Action::Continuous(u)).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }
}
