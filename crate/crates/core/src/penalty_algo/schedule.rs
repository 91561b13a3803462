use serde::{Deserialize, Serialize};

use super::PenaltyConfig;
use crate::error::{Error, Result};
use crate::problem::Regime;

/// Multipliers of the ε-driven schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConstants {
    pub c_sigma: f64,
    pub c_b: f64,
    pub c_n: f64,
    pub c_t: f64,
    pub c_k: f64,
    pub c_h: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants { c_sigma: 1.0, c_b: 1.0, c_n: 1.0, c_t: 1.0, c_k: 1.0, c_h: 1.0 }
    }
}

/// A configuration derived from a target accuracy ε.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epsilon: f64,
    pub regime: Regime,
    pub config: PenaltyConfig,
    pub total_samples: u64,
}

/// `T·(K(n + BH) + BH)` for BRL, `T·(KB + B)` for the standard regime.
pub fn total_samples(cfg: &PenaltyConfig, regime: Regime) -> u64 {
    cfg.t as u64 * cfg.samples_per_outer(regime)
}

/// Ceiling that treats values within relative 1e-9 of an integer as that
/// integer, floored at 1.
fn count(x: f64) -> Result<usize> {
    if !x.is_finite() || x > 1e15 {
        return Err(Error::invalid(format!("schedule count {x} is out of range")));
    }
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    Ok((c as usize).max(1))
}

/// `σ = √(c_σ ε)`, `B = ⌈c_B/ε²⌉`, `n = ⌈c_n/ε²⌉` (BRL only), `T = ⌈c_T/ε⌉`,
/// `K = ⌈c_K ln(1/ε)⌉`, `H = ⌈c_H ln(1/ε)⌉` (BRL only); every count is at
/// least 1. The remaining fields come from `base`.
pub fn schedule_from_epsilon(
    epsilon: f64,
    regime: Regime,
    constants: &ScheduleConstants,
    base: &PenaltyConfig,
) -> Result<Schedule> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let c = constants;
    for (name, v) in [("c_sigma", c.c_sigma), ("c_b", c.c_b), ("c_n", c.c_n), ("c_t", c.c_t), ("c_k", c.c_k), ("c_h", c.c_h)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("schedule constant {name} must be positive, got {v}")));
        }
    }
    let log_inv = (1.0 / epsilon).ln();
    let mut config = base.clone();
    config.sigma = (c.c_sigma * epsilon).sqrt();
    config.b = count(c.c_b / (epsilon * epsilon))?;
    config.t = count(c.c_t / epsilon)?;
    config.k = count(c.c_k * log_inv)?;
    match regime {
        Regime::Brl => {
            config.n = count(c.c_n / (epsilon * epsilon))?;
            config.h = count(c.c_h * log_inv)?;
        }
        Regime::Standard => {
            config.n = 1;
            config.h = 1;
        }
    }
    config.validate()?;
    let total = total_samples(&config, regime);
    Ok(Schedule { epsilon, regime, config, total_samples: total })
}
