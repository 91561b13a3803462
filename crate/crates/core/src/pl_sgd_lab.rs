//! Biased SGD under the PL condition.
//!
//! For an `L`-smooth `f` with `‖∇f(x)‖² ≥ 2μ(f(x) − f*)` and a gradient oracle
//! whose mean-squared error is at most `β`, the iterates of
//! `x ← x − η·oracle(x)` with `η ≤ 1/L` satisfy
//!
//! ```text
//! E[f(x_t)] − f* ≤ (1 − μη)^t δ_0 + (Lη² + η)β / (2μη).
//! ```
//!
//! This module runs that recursion, measures μ on a grid, and certifies the
//! bound on seed-averaged trajectories.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::param::ParamVec;
use crate::rng::RngStream;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A differentiable objective with a known minimum value.
#[derive(Clone)]
pub struct PlFunction {
    name: String,
    dim: usize,
    value: ValueFn,
    grad: GradFn,
    f_star: f64,
    smooth_l: f64,
}

impl std::fmt::Debug for PlFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("f_star", &self.f_star)
            .field("smooth_l", &self.smooth_l)
            .finish()
    }
}

impl PlFunction {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        f_star: f64,
        smooth_l: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("function dimension must be at least 1"));
        }
        if !f_star.is_finite() || !(smooth_l > 0.0 && smooth_l.is_finite()) {
            return Err(Error::invalid("f* must be finite and L positive"));
        }
        Ok(PlFunction { name: name.into(), dim, value: Arc::new(value), grad: Arc::new(grad), f_star, smooth_l })
    }

    /// `x²` (L = 2, μ = 2).
    pub fn quadratic() -> Self {
        Self::new("quadratic", 1, |x| x[0] * x[0], |x| vec![2.0 * x[0]], 0.0, 2.0).expect("valid")
    }

    /// `x⁴`, not PL on any box containing 0.
    pub fn quartic() -> Self {
        Self::new("quartic", 1, |x| x[0].powi(4), |x| vec![4.0 * x[0].powi(3)], 0.0, 12.0).expect("valid")
    }

    /// `x² + 3 sin² x` (non-convex, PL, L = 8).
    pub fn sinsq() -> Self {
        Self::new(
            "sinsq",
            1,
            |x| x[0] * x[0] + 3.0 * x[0].sin().powi(2),
            |x| vec![2.0 * x[0] + 3.0 * (2.0 * x[0]).sin()],
            0.0,
            8.0,
        )
        .expect("valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn smooth_l(&self) -> f64 {
        self.smooth_l
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::invalid("box bounds must be finite with lo <= hi"));
        }
        Ok(DomainBox { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Grid points `lo + i·step` per axis (including `hi` when it lands on the grid).
    fn axes(&self, step: f64) -> Vec<Vec<f64>> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| {
                let n = ((b - a) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| a + i as f64 * step).collect()
            })
            .collect()
    }
}

/// Result of a grid PL measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlMeasurement {
    /// `inf ‖∇f‖² / (f − f*)` over admissible grid points.
    pub ratio: f64,
    /// `ratio / 2`, the μ of `‖∇f‖² ≥ 2μ(f − f*)`.
    pub mu: f64,
    /// Grid point attaining the infimum.
    pub argmin: Vec<f64>,
    /// Number of admissible grid points.
    pub admissible: usize,
    /// False when the infimum collapses near the minimizer, i.e. the ratio
    /// degenerates rather than being bounded away from zero.
    pub is_pl: bool,
}

/// Points with `f − f*` below this are excluded from the PL ratio.
pub const PL_EXCLUSION: f64 = 1e-12;

/// Measures the PL ratio of `f` on a grid of the box with spacing `step`.
pub fn measure_pl_constant(f: &PlFunction, domain: &DomainBox, step: f64) -> Result<PlMeasurement> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("grid step must be positive, got {step}")));
    }
    if domain.dim() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: domain.dim() });
    }
    let axes = domain.axes(step);
    let total = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len()));
    match total {
        Some(n) if n <= 50_000_000 => {}
        _ => return Err(Error::invalid("PL measurement grid is too large")),
    }
    let mut x = vec![0.0; f.dim()];
    let mut idx = vec![0usize; f.dim()];
    let mut best = (f64::INFINITY, Vec::new());
    let mut gaps_max = 0.0f64;
    let mut admissible = 0usize;
    let mut samples: Vec<(f64, f64)> = Vec::new();
    loop {
        for (d, &i) in idx.iter().enumerate() {
            x[d] = axes[d][i];
        }
        let gap = f.value(&x) - f.f_star();
        if !gap.is_finite() {
            return Err(Error::NonFinite(format!("{} at {x:?}", f.name())));
        }
        if gap >= PL_EXCLUSION {
            let g2: f64 = f.grad(&x).iter().map(|g| g * g).sum();
            let ratio = g2 / gap;
            admissible += 1;
            gaps_max = gaps_max.max(gap);
            samples.push((ratio, gap));
            if ratio < best.0 {
                best = (ratio, x.clone());
            }
        }
        let mut d = 0;
        loop {
            if d == idx.len() {
                break;
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == idx.len() {
            break;
        }
    }
    if admissible == 0 {
        return Err(Error::invalid("no admissible grid points (f − f* ≥ 1e-12) in the box"));
    }
    let far = 1e-3 * gaps_max;
    let far_ratio = samples.iter().filter(|(_, g)| *g >= far).map(|(r, _)| *r).fold(f64::INFINITY, f64::min);
    let is_pl = best.0 >= 0.5 * far_ratio;
    Ok(PlMeasurement { ratio: best.0, mu: best.0 / 2.0, argmin: best.1, admissible, is_pl })
}

/// Deterministic bias added to every oracle call.
#[derive(Clone)]
pub enum BiasField {
    Zero,
    Constant(Vec<f64>),
    Custom(GradFn),
}

impl std::fmt::Debug for BiasField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BiasField::Zero => write!(f, "Zero"),
            BiasField::Constant(b) => write!(f, "Constant({b:?})"),
            BiasField::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Gradient oracle `∇f(x) + b(x) + noise_std·ξ` with a declared bound
/// `β ≥ sup_x E‖oracle(x) − ∇f(x)‖²`.
#[derive(Clone, Debug)]
pub struct BiasedOracle {
    pub bias: BiasField,
    pub noise_std: f64,
    pub declared_beta: f64,
}

impl BiasedOracle {
    pub fn new(bias: BiasField, noise_std: f64, declared_beta: f64) -> Result<Self> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) || !(declared_beta >= 0.0 && declared_beta.is_finite()) {
            return Err(Error::invalid("noise_std and beta must be non-negative and finite"));
        }
        Ok(BiasedOracle { bias, noise_std, declared_beta })
    }

    /// Constant scalar bias `b` and noise `s` in one dimension, declaring the
    /// tight `β = b² + s²`.
    pub fn scalar(bias: f64, noise_std: f64) -> Result<Self> {
        let field = if bias == 0.0 { BiasField::Zero } else { BiasField::Constant(vec![bias]) };
        Self::new(field, noise_std, bias * bias + noise_std * noise_std)
    }

    fn bias_at(&self, x: &[f64]) -> Vec<f64> {
        match &self.bias {
            BiasField::Zero => vec![0.0; x.len()],
            BiasField::Constant(b) => b.clone(),
            BiasField::Custom(f) => f(x),
        }
    }

    pub fn sample(&self, f: &PlFunction, x: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let mut g = f.grad(x);
        let b = self.bias_at(x);
        for (gi, bi) in g.iter_mut().zip(b) {
            *gi += bi;
            if self.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *gi += self.noise_std * z;
            }
        }
        g
    }

    /// Monte-Carlo estimate of `max_x E‖oracle(x) − ∇f(x)‖²` over `points`.
    pub fn measured_beta(&self, f: &PlFunction, points: &[Vec<f64>], draws: usize, rng: &RngStream) -> f64 {
        points
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut r = rng.spawn(i as u64);
                let exact = f.grad(x);
                let mut acc = 0.0;
                for _ in 0..draws {
                    let g = self.sample(f, x, &mut r);
                    acc += g.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
                acc / draws.max(1) as f64
            })
            .fold(0.0, f64::max)
    }
}

/// Constants entering the envelope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaConstants {
    pub smooth_l: f64,
    pub mu: f64,
    pub eta: f64,
    pub beta: f64,
}

impl LemmaConstants {
    /// `(Lη² + η)β / (2μη)`
    pub fn floor_bound(&self) -> f64 {
        let LemmaConstants { smooth_l: l, mu, eta, beta } = *self;
        (l * eta * eta + eta) * beta / (2.0 * mu * eta)
    }

    /// `(1 − μη)^t δ_0 + floor_bound()`
    pub fn envelope(&self, t: usize, delta0: f64) -> f64 {
        (1.0 - self.mu * self.eta).powi(t as i32) * delta0 + self.floor_bound()
    }
}

/// Trajectory of one biased-SGD run against its envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct LemmaReport {
    pub constants: LemmaConstants,
    /// `δ_t = f(x_t) − f*` for `t = 0..=steps` (shorter when aborted).
    pub gaps: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Steps with `δ_t` above the envelope.
    pub violations: usize,
    /// Mean `δ_t` over the last 20% of steps.
    pub floor_estimate: f64,
    pub aborted: Option<String>,
}

/// Mean over the last 20% (at least one) of the entries.
fn tail_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = (values.len() / 5).max(1);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

fn envelope_curve(c: &LemmaConstants, len: usize, delta0: f64) -> Vec<f64> {
    (0..len).map(|t| c.envelope(t, delta0)).collect()
}

/// Runs `x_{t+1} = x_t − η·oracle(x_t)` for `steps` steps.
///
/// `mu` is the PL constant the envelope is computed with; `L` and `β` come
/// from `f` and the oracle. Divergence (`δ_t > 10⁶ δ_0`) stops the run and is
/// reported in [`LemmaReport::aborted`].
pub fn run_biased_sgd(
    f: &PlFunction,
    oracle: &BiasedOracle,
    x0: &ParamVec,
    eta: f64,
    mu: f64,
    steps: usize,
    rng: &RngStream,
) -> Result<LemmaReport> {
    if x0.dim() != f.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x0.dim() });
    }
    if !(eta > 0.0 && eta <= 1.0 / f.smooth_l()) {
        return Err(Error::invalid(format!("step {eta} must lie in (0, 1/L] with L = {}", f.smooth_l())));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid(format!("PL constant must be positive, got {mu}")));
    }
    let constants = LemmaConstants { smooth_l: f.smooth_l(), mu, eta, beta: oracle.declared_beta };
    let mut rng = rng.restart();
    let mut x = x0.as_slice().to_vec();
    let delta0 = f.value(&x) - f.f_star();
    let mut gaps = Vec::with_capacity(steps + 1);
    gaps.push(delta0);
    let mut aborted = None;
    for t in 1..=steps {
        let g = oracle.sample(f, &x, &mut rng);
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= eta * gi;
        }
        let delta = f.value(&x) - f.f_star();
        if !delta.is_finite() || (delta0 > 0.0 && delta > 1e6 * delta0) {
            aborted = Some(format!("diverged at step {t}: gap {delta}"));
            break;
        }
        gaps.push(delta);
    }
    let envelope = envelope_curve(&constants, gaps.len(), delta0);
    let violations = gaps.iter().zip(&envelope).filter(|(g, e)| g > e).count();
    let floor_estimate = tail_mean(&gaps[1..]);
    Ok(LemmaReport { constants, gaps, envelope, violations, floor_estimate, aborted })
}

impl LemmaReport {
    /// Writes `step,gap,envelope` rows for `t = 1..`, then a
    /// `floor,<estimate>,<bound>` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,gap,envelope")?;
        for t in 1..self.gaps.len() {
            writeln!(out, "{t},{:?},{:?}", self.gaps[t], self.envelope[t])?;
        }
        writeln!(out, "floor,{:?},{:?}", self.floor_estimate, self.constants.floor_bound())?;
        Ok(())
    }
}

/// Absolute tolerance added to floor comparisons (gaps at machine precision).
pub const FLOOR_ABS_TOL: f64 = 1e-12;

/// Seed-averaged certification of the envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct Certification {
    pub constants: LemmaConstants,
    pub seeds: usize,
    pub slack: f64,
    /// Seed-mean `δ_t`, `t = 0..=steps`.
    pub mean_gaps: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Steps where the mean exceeds `slack · envelope`.
    pub violations: usize,
    pub floor_estimate: f64,
    pub floor_bound: f64,
}

impl Certification {
    pub fn envelope_holds(&self) -> bool {
        self.violations == 0
    }

    pub fn floor_holds(&self) -> bool {
        self.floor_estimate <= self.floor_bound + FLOOR_ABS_TOL
    }

    pub fn passed(&self) -> bool {
        self.envelope_holds() && self.floor_holds()
    }
}

/// Runs `seeds` independent trajectories (seed `s` uses child `s` of
/// `RngStream::new(base_seed, 0)`) and checks the mean gap against
/// `slack · envelope(t)` at every step.
#[allow(clippy::too_many_arguments)]
pub fn certify_lemma(
    f: &PlFunction,
    oracle: &BiasedOracle,
    x0: &ParamVec,
    eta: f64,
    mu: f64,
    steps: usize,
    seeds: usize,
    slack: f64,
    base_seed: u64,
) -> Result<Certification> {
    if seeds == 0 {
        return Err(Error::invalid("at least one seed is required"));
    }
    if !(slack >= 1.0) {
        return Err(Error::invalid(format!("slack multiplier must be at least 1, got {slack}")));
    }
    let root = RngStream::new(base_seed, 0);
    let reports: Vec<LemmaReport> = (0..seeds)
        .into_par_iter()
        .map(|s| run_biased_sgd(f, oracle, x0, eta, mu, steps, &root.spawn(s as u64)))
        .collect::<Result<_>>()?;
    if let Some(r) = reports.iter().find(|r| r.aborted.is_some()) {
        return Err(Error::Diverged(r.aborted.clone().unwrap_or_default()));
    }
    let mut mean = vec![0.0; steps + 1];
    for r in &reports {
        for (m, g) in mean.iter_mut().zip(&r.gaps) {
            *m += g;
        }
    }
    for m in &mut mean {
        *m /= seeds as f64;
    }
    let constants = reports[0].constants;
    let envelope = envelope_curve(&constants, steps + 1, mean[0]);
    let violations = mean.iter().zip(&envelope).filter(|(m, e)| **m > slack * **e).count();
    Ok(Certification {
        constants,
        seeds,
        slack,
        floor_estimate: tail_mean(&mean[1..]),
        floor_bound: constants.floor_bound(),
        mean_gaps: mean,
        envelope,
        violations,
    })
}
