//! Registry of analytic gradients checked against central differences.

use crate::diagnostics::GradCheck;
use crate::error::{Error, Result};
use crate::estimators::{grad_lambda_j_exact, grad_phi_j_exact, RlContext};
use crate::mdp_env::{exact_discounted_return, FeatureTable, MdpSpec, Policy, RewardFeatures, RewardModel, Squash, TabularMdp};
use crate::param::ParamVec;
use crate::preference::{expected_upper, grad_phi_g_full, make_pairs, upper_loss_g, LabelMode, Labeler};
use crate::problem::GradTarget;
use crate::rng::RngStream;
use crate::synthetic_bilevel::{InstanceKind, SyntheticProblem};

/// Finite-difference step of every registered check.
pub const FD_EPS: f64 = 1e-5;

/// Names of the registered objectives, in execution order.
pub const OBJECTIVES: [&str; 11] = [
    "grad_phi_G",
    "grad_phi_G_expected",
    "grad_lambda_G_expected",
    "grad_phi_J_exact",
    "grad_lambda_J_exact_beta0",
    "grad_lambda_J_exact_beta",
    "grad_lambda_J_exact_random",
    "quad_G",
    "quad_J",
    "sinsq_G",
    "sinsq_J",
];

fn uniform_point(dim: usize, half_width: f64) -> impl Fn(&mut RngStream) -> ParamVec + Sync + 'static {
    move |rng| {
        let v = (0..dim).map(|_| half_width * (2.0 * rng.uniform() - 1.0)).collect();
        ParamVec::new(v).expect("uniform draws are finite")
    }
}

fn chain_setup(beta: f64) -> Result<(MdpSpec, Policy, RewardModel)> {
    let env = MdpSpec::chain(2, 0.1, 0.9)?;
    let policy = Policy::softmax(ParamVec::zeros(2), FeatureTable::binary_logits(2), 0.0)?;
    let reward = RewardModel::new(
        ParamVec::zeros(4),
        RewardFeatures::Table(FeatureTable::one_hot(2, 2)),
        beta,
        Squash::Logistic,
    )?;
    Ok((env, policy, reward))
}

fn true_labeler(reward: &RewardModel) -> Result<Labeler> {
    Ok(Labeler::new(reward.with_phi(ParamVec::new(vec![-1.0, 0.5, 0.0, 2.0])?)?, LabelMode::Bernoulli))
}

fn synthetic_check(name: &str, kind: InstanceKind, upper: bool) -> Result<GradCheck> {
    let p = SyntheticProblem::new(kind)?;
    let q = p.clone();
    let (tp, tl) = if upper { (GradTarget::PhiG, GradTarget::LambdaG) } else { (GradTarget::PhiJ, GradTarget::LambdaJ) };
    Ok(GradCheck::new(
        name,
        move |x| {
            let (phi, lambda) = (x.get(0), x.get(1));
            Ok(if upper { p.g(phi, lambda) } else { p.j(phi, lambda) })
        },
        move |x| ParamVec::new(vec![q.grad(tp, x.get(0), x.get(1)), q.grad(tl, x.get(0), x.get(1))]),
        uniform_point(2, 3.0),
        FD_EPS,
    ))
}

/// Builds the named check.
pub fn build_check(name: &str) -> Result<GradCheck> {
    match name {
        "grad_phi_G" => {
            let (env, policy, reward) = chain_setup(0.0)?;
            let labeler = true_labeler(&reward)?;
            let pairs = make_pairs(&env, &policy, &labeler, 64, 3, &RngStream::new(11, 0))?;
            let (r1, p1) = (reward.clone(), pairs.clone());
            Ok(GradCheck::new(
                name,
                move |phi| upper_loss_g(&reward.with_phi(phi.clone())?, &pairs),
                move |phi| grad_phi_g_full(&r1.with_phi(phi.clone())?, &p1),
                uniform_point(4, 2.0),
                FD_EPS,
            ))
        }
        "grad_phi_G_expected" | "grad_lambda_G_expected" => {
            let (env, policy, reward) = chain_setup(0.0)?;
            let labeler = true_labeler(&reward)?;
            let lambda_fixed = ParamVec::new(vec![0.4, -0.7])?;
            let phi_fixed = ParamVec::new(vec![0.3, -0.2, 1.1, 0.6])?;
            let wrt_phi = name == "grad_phi_G_expected";
            let eval = move |x: &ParamVec| {
                let (phi, lambda) = if wrt_phi { (x, &lambda_fixed) } else { (&phi_fixed, x) };
                expected_upper(&env, &policy.with_lambda(lambda.clone())?, &reward.with_phi(phi.clone())?, &labeler, 2)
            };
            let eval2 = eval.clone();
            Ok(GradCheck::new(
                name,
                move |x| Ok(eval(x)?.value),
                move |x| {
                    let e = eval2(x)?;
                    Ok(if wrt_phi { e.grad_phi } else { e.grad_lambda })
                },
                uniform_point(if wrt_phi { 4 } else { 2 }, 2.0),
                FD_EPS,
            ))
        }
        "grad_phi_J_exact" => {
            let (env, policy, reward) = chain_setup(0.1)?;
            let policy = policy.with_lambda(ParamVec::new(vec![0.5, -0.3])?)?;
            let reference = policy.reference();
            let (e1, p1, r1) = (env.clone(), policy.clone(), reward.clone());
            Ok(GradCheck::new(
                name,
                move |phi| exact_discounted_return(&env, &policy, &reference, &reward.with_phi(phi.clone())?),
                move |phi| grad_phi_j_exact(&e1, &p1, &r1.with_phi(phi.clone())?, None),
                uniform_point(4, 2.0),
                FD_EPS,
            ))
        }
        "grad_lambda_J_exact_beta0" | "grad_lambda_J_exact_beta" | "grad_lambda_J_exact_random" => {
            let beta = if name.ends_with("beta0") { 0.0 } else { 0.1 };
            let (env, policy, reward, dim) = if name.ends_with("random") {
                let env = MdpSpec::Tabular(TabularMdp::random(3, 3, 0.9, &mut RngStream::new(5, 0))?);
                let policy = Policy::softmax(ParamVec::zeros(9), FeatureTable::one_hot(3, 3), 0.01)?;
                let reward = RewardModel::new(
                    ParamVec::new((0..9).map(|i| (i as f64 * 0.7).sin()).collect())?,
                    RewardFeatures::Table(FeatureTable::one_hot(3, 3)),
                    beta,
                    Squash::Logistic,
                )?;
                (env, policy, reward, 9)
            } else {
                let (env, policy, reward) = chain_setup(beta)?;
                (env, policy, reward.with_phi(ParamVec::new(vec![-1.0, 0.5, 0.0, 2.0])?)?, 2)
            };
            let reference = policy.reference();
            let (e1, p1, r1, ref1) = (env.clone(), policy.clone(), reward.clone(), reference.clone());
            Ok(GradCheck::new(
                name,
                move |lambda| exact_discounted_return(&env, &policy.with_lambda(lambda.clone())?, &reference, &reward),
                move |lambda| {
                    let pol = p1.with_lambda(lambda.clone())?;
                    grad_lambda_j_exact(&RlContext { env: &e1, policy: &pol, policy_ref: &ref1, reward: &r1 })
                },
                uniform_point(dim, 2.0),
                FD_EPS,
            ))
        }
        "quad_G" => synthetic_check(name, InstanceKind::Quad, true),
        "quad_J" => synthetic_check(name, InstanceKind::Quad, false),
        "sinsq_G" => synthetic_check(name, InstanceKind::Sinsq, true),
        "sinsq_J" => synthetic_check(name, InstanceKind::Sinsq, false),
        other => Err(Error::invalid(format!(
            "unknown gradient-check objective `{other}` (known: {})",
            OBJECTIVES.join(", ")
        ))),
    }
}
