use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use super::features::{dot, FeatureTable};
use super::{sample_categorical, Action, State};
use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::rng::RngStream;

/// Policy family.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    /// Softmax over finite actions with linear logits `λᵀξ(s, a)`, mixed with
    /// the uniform distribution so that every probability is at least `floor`.
    Softmax { features: FeatureTable, floor: f64 },
    /// Gaussian with mean `λ₀·s + λ₁` and fixed standard deviation, for the
    /// one-dimensional continuous environment.
    Gaussian { std: f64 },
}

/// Parameterized policy `π_λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    lambda: ParamVec,
    kind: PolicyKind,
}

impl Policy {
    pub fn softmax(lambda: ParamVec, features: FeatureTable, floor: f64) -> Result<Self> {
        if lambda.dim() != features.dim() {
            return Err(Error::DimensionMismatch { expected: features.dim(), got: lambda.dim() });
        }
        let n_actions = features.n_actions() as f64;
        if !(0.0..1.0).contains(&(floor * n_actions)) {
            return Err(Error::invalid(format!(
                "probability floor {floor} is infeasible for {n_actions} actions"
            )));
        }
        Ok(Policy { lambda, kind: PolicyKind::Softmax { features, floor } })
    }

    pub fn gaussian(lambda: ParamVec, std: f64) -> Result<Self> {
        if lambda.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: lambda.dim() });
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("Gaussian policy std must be positive, got {std}")));
        }
        Ok(Policy { lambda, kind: PolicyKind::Gaussian { std } })
    }

    /// Same family at new parameters.
    pub fn with_lambda(&self, lambda: ParamVec) -> Result<Self> {
        if lambda.dim() != self.lambda.dim() {
            return Err(Error::DimensionMismatch { expected: self.lambda.dim(), got: lambda.dim() });
        }
        Ok(Policy { lambda, kind: self.kind.clone() })
    }

    /// The default reference policy: λ = 0, i.e. uniform over finite actions
    /// or a zero-mean Gaussian.
    pub fn reference(&self) -> Policy {
        Policy { lambda: ParamVec::zeros(self.lambda.dim()), kind: self.kind.clone() }
    }

    pub fn lambda(&self) -> &ParamVec {
        &self.lambda
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.lambda.dim()
    }

    pub fn n_actions(&self) -> Option<usize> {
        match &self.kind {
            PolicyKind::Softmax { features, .. } => Some(features.n_actions()),
            PolicyKind::Gaussian { .. } => None,
        }
    }

    /// Probability floor of a finite policy (zero for Gaussian policies).
    pub fn floor(&self) -> f64 {
        match &self.kind {
            PolicyKind::Softmax { floor, .. } => *floor,
            PolicyKind::Gaussian { .. } => 0.0,
        }
    }

    /// Action probabilities at finite state `s`, written into `out`.
    pub fn probs_into(&self, s: usize, out: &mut [f64]) {
        let PolicyKind::Softmax { features, floor } = &self.kind else {
            panic!("probs_into called on a continuous policy");
        };
        let na = features.n_actions();
        let lam = self.lambda.as_slice();
        let mut max_logit = f64::NEG_INFINITY;
        for (a, slot) in out.iter_mut().enumerate().take(na) {
            *slot = dot(lam, features.get(s, a));
            max_logit = max_logit.max(*slot);
        }
        let mut total = 0.0;
        for slot in out.iter_mut().take(na) {
            *slot = (*slot - max_logit).exp();
            total += *slot;
        }
        let mix = 1.0 - floor * na as f64;
        for slot in out.iter_mut().take(na) {
            *slot = mix * (*slot / total) + floor;
        }
    }

    pub fn probs(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions().expect("finite policy")];
        self.probs_into(s, &mut out);
        out
    }

    fn gaussian_mean(&self, s: f64) -> f64 {
        let l = self.lambda.as_slice();
        l[0] * s + l[1]
    }

    /// `log π_λ(a | s)`.
    pub fn log_prob(&self, s: &State, a: &Action) -> Result<f64> {
        match (&self.kind, s, a) {
            (PolicyKind::Softmax { features, .. }, State::Discrete(si), Action::Discrete(ai)) => {
                if *si >= features.n_states() || *ai >= features.n_actions() {
                    return Err(Error::OutOfSpace(format!("({si}, {ai})")));
                }
                let mut buf = vec![0.0; features.n_actions()];
                self.probs_into(*si, &mut buf);
                Ok(buf[*ai].ln())
            }
            (PolicyKind::Gaussian { std }, State::Continuous(x), Action::Continuous(u)) => {
                let z = (u - self.gaussian_mean(*x)) / std;
                Ok(-0.5 * z * z - (std * (2.0 * PI).sqrt()).ln())
            }
            _ => Err(Error::invalid("state/action kind does not match the policy")),
        }
    }

    /// Adds `weight · ∇λ log π_λ(a | s)` to `out`.
    pub fn add_grad_log_prob(&self, s: &State, a: &Action, weight: f64, out: &mut [f64]) -> Result<()> {
        match (&self.kind, s, a) {
            (PolicyKind::Softmax { features, floor }, State::Discrete(si), Action::Discrete(ai)) => {
                let na = features.n_actions();
                if *si >= features.n_states() || *ai >= na {
                    return Err(Error::OutOfSpace(format!("({si}, {ai})")));
                }
                let mix = 1.0 - floor * na as f64;
                let mut p = vec![0.0; na];
                self.probs_into(*si, &mut p);
                // Softmax part q_b recovered from the floored mixture.
                let q: Vec<f64> = p.iter().map(|pb| (pb - floor) / mix).collect();
                let coef = weight * mix * q[*ai] / p[*ai];
                if coef == 0.0 {
                    return Ok(());
                }
                let xi_a = features.get(*si, *ai);
                for (k, o) in out.iter_mut().enumerate() {
                    let mean_k: f64 = (0..na).map(|b| q[b] * features.get(*si, b)[k]).sum();
                    *o += coef * (xi_a[k] - mean_k);
                }
                Ok(())
            }
            (PolicyKind::Gaussian { std }, State::Continuous(x), Action::Continuous(u)) => {
                let c = weight * (u - self.gaussian_mean(*x)) / (std * std);
                out[0] += c * x;
                out[1] += c;
                Ok(())
            }
            _ => Err(Error::invalid("state/action kind does not match the policy")),
        }
    }

    pub fn grad_log_prob(&self, s: &State, a: &Action) -> Result<ParamVec> {
        let mut out = vec![0.0; self.dim()];
        self.add_grad_log_prob(s, a, 1.0, &mut out)?;
        ParamVec::new(out)
    }

    pub fn sample_action(&self, s: &State, rng: &mut RngStream) -> Result<Action> {
        match (&self.kind, s) {
            (PolicyKind::Softmax { features, .. }, State::Discrete(si)) => {
                if *si >= features.n_states() {
                    return Err(Error::OutOfSpace(format!("{si}")));
                }
                let mut p = vec![0.0; features.n_actions()];
                self.probs_into(*si, &mut p);
                Ok(Action::Discrete(sample_categorical(&p, rng.uniform())))
            }
            (PolicyKind::Gaussian { std }, State::Continuous(x)) => {
                let z: f64 = StandardNormal.sample(rng);
                Ok(Action::Continuous(self.gaussian_mean(*x) + std * z))
            }
            _ => Err(Error::invalid("state kind does not match the policy")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tabular(lambda: Vec<f64>, floor: f64) -> Policy {
        Policy::softmax(ParamVec::new(lambda).unwrap(), FeatureTable::one_hot(3, 3), floor).unwrap()
    }

    #[test]
    fn reference_is_uniform() {
        let p = tabular(vec![0.3; 9], 0.05).reference();
        for s in 0..3 {
            for v in p.probs(s) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn infeasible_floor_rejected() {
        assert!(Policy::softmax(ParamVec::zeros(9), FeatureTable::one_hot(3, 3), 0.34).is_err());
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let lam = vec![0.4, -1.2, 0.7, 2.0, 0.1, -0.3, 0.0, 1.5, -2.2];
        let pol = tabular(lam.clone(), 0.02);
        let eps = 1e-6;
        for s in 0..3 {
            for a in 0..3 {
                let g = pol.grad_log_prob(&State::Discrete(s), &Action::Discrete(a)).unwrap();
                for k in 0..9 {
                    let mut up = lam.clone();
                    up[k] += eps;
                    let mut dn = lam.clone();
                    dn[k] -= eps;
                    let lp = |v: Vec<f64>| {
                        tabular(v, 0.02).log_prob(&State::Discrete(s), &Action::Discrete(a)).unwrap()
                    };
                    let fd = (lp(up) - lp(dn)) / (2.0 * eps);
                    assert!((fd - g.get(k)).abs() < 1e-7, "s={s} a={a} k={k}: {fd} vs {}", g.get(k));
                }
            }
        }
    }

    #[test]
    fn gaussian_grad_log_prob_matches_finite_differences() {
        let pol = Policy::gaussian(ParamVec::new(vec![0.5, -0.2]).unwrap(), 0.3).unwrap();
        let (s, a) = (State::Continuous(0.4), Action::Continuous(0.1));
        let g = pol.grad_log_prob(&s, &a).unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            let mut up = pol.lambda().clone().into_vec();
            up[k] += eps;
            let mut dn = pol.lambda().clone().into_vec();
            dn[k] -= eps;
            let lp = |v: Vec<f64>| pol.with_lambda(ParamVec::new(v).unwrap()).unwrap().log_prob(&s, &a).unwrap();
            let fd = (lp(up) - lp(dn)) / (2.0 * eps);
            assert!((fd - g.get(k)).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn probabilities_normalized_and_floored(lam in prop::collection::vec(-8.0f64..8.0, 9), floor in 0.0f64..0.3) {
            let pol = tabular(lam, floor);
            for s in 0..3 {
                let p = pol.probs(s);
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for v in p {
                    prop_assert!(v >= floor - 1e-15);
                }
            }
        }
    }
}
