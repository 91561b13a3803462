//! First-order, Hessian-free penalty method for bilevel reinforcement learning
//! and for stochastic bilevel optimization with PL lower levels.
//!
//! The crate is organized bottom-up:
//!
//! - [`param`], [`rng`] and [`problem`] hold the numeric foundation: parameter
//!   vectors, reproducible random streams and the [`problem::BilevelProblem`]
//!   interface every solver runs against.
//! - [`mdp_env`] provides discounted MDPs, parameterized policies and reward
//!   heads, trajectory sampling and exact tabular policy evaluation.
//! - [`estimators`] implements the Monte-Carlo Q estimate, the policy gradient
//!   with the KL term and the truncated reward gradient.
//! - [`preference`] is the Bradley–Terry upper objective and synthetic labeler.
//! - [`penalty_algo`] is the penalty solver itself: normalized inner ascent
//!   loops, the penalty hypergradient and the outer descent.
//! - [`synthetic_bilevel`] and [`pl_sgd_lab`] are the non-MDP instances and the
//!   biased-SGD-under-PL certification harness.
//! - [`diagnostics`] holds the independent oracles (finite differences, grid
//!   inner solves, error decomposition, truncation curves).
//! - [`harness`] is the configuration and experiment layer used by the CLI.

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod mdp_env;
pub mod param;
pub mod penalty_algo;
pub mod pl_sgd_lab;
pub mod preference;
pub mod problem;
pub mod rng;
pub mod synthetic_bilevel;

pub use error::{Error, Result};
pub use param::{vec_axpy, vec_norm, ParamVec};
pub use problem::{BilevelProblem, GradTarget, OracleBudget, Regime};
pub use rng::{spawn_stream, RngStream};
