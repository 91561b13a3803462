//! Independent oracles for checking the estimators and the solver.
//!
//! Nothing here shares code paths with the gradients it checks: finite
//! differences only evaluate objectives, and the inner solves are grid
//! searches over λ.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::grad_phi_j_exact;
use crate::mdp_env::{MdpSpec, Policy, RewardModel};
use crate::param::ParamVec;
use crate::penalty_algo::PenaltyConfig;
use crate::problem::{BilevelProblem, GradTarget};
use crate::rng::RngStream;

/// Central differences `(f(x + εe_i) − f(x − εe_i)) / 2ε`.
pub fn central_fd_grad(f: impl Fn(&ParamVec) -> Result<f64>, x: &ParamVec, eps: f64) -> Result<ParamVec> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.dim());
    let mut probe = x.as_slice().to_vec();
    for i in 0..x.dim() {
        let xi = probe[i];
        probe[i] = xi + eps;
        let hi = f(&ParamVec::from_slice(&probe)?)?;
        probe[i] = xi - eps;
        let lo = f(&ParamVec::from_slice(&probe)?)?;
        probe[i] = xi;
        if !(hi.is_finite() && lo.is_finite()) {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    ParamVec::new(out)
}

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn relative_error(a: &ParamVec, b: &ParamVec) -> Result<f64> {
    let diff = a.sub(b)?.norm();
    Ok(diff / a.norm().max(b.norm()).max(REL_FLOOR))
}

/// Rectangular λ grid with `points` nodes per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
    /// Polish each grid argmax by coordinate golden-section search within one
    /// cell.
    pub refine: bool,
}

impl GridSpec {
    pub fn cube(dim: usize, half_width: f64, points: usize) -> Self {
        GridSpec { lo: vec![-half_width; dim], hi: vec![half_width; dim], points, refine: true }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 || dim > 2 {
            return Err(Error::unsupported(format!("grid inner solves need λ-dimension 1 or 2, got {dim}")));
        }
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.lo.len() });
        }
        if self.points < 2 || self.lo.iter().zip(&self.hi).any(|(a, b)| !(a < b)) {
            return Err(Error::invalid("grid needs at least two points per axis and lo < hi"));
        }
        Ok(())
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.points - 1) as f64
    }

    fn node(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        (0..self.lo.len())
            .map(|d| {
                let i = rest % self.points;
                rest /= self.points;
                self.lo[d] + i as f64 * self.step(d)
            })
            .collect()
    }

    fn on_boundary(&self, x: &[f64]) -> bool {
        x.iter().enumerate().any(|(d, &v)| {
            let tol = 0.5 * self.step(d);
            v - self.lo[d] < tol || self.hi[d] - v < tol
        })
    }
}

/// Grid solution of both inner problems at fixed φ and σ.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolution {
    /// argmax_λ J(φ, λ)
    pub lambda_star: ParamVec,
    /// argmax_λ J(φ, λ) − σG(φ, λ)
    pub lambda_star_sigma: ParamVec,
    /// max_λ J(φ, λ)
    pub j_star: f64,
    /// `Φσ(φ) = G(φ, λ*_σ) + (J(φ, λ*) − J(φ, λ*_σ)) / σ`
    pub phi_sigma: f64,
    /// Either argmax lies on the grid boundary.
    pub boundary: bool,
}

fn grid_argmax(grid: &GridSpec, f: &(dyn Fn(&[f64]) -> Result<f64> + Sync)) -> Result<(Vec<f64>, f64)> {
    let total = grid.points.pow(grid.lo.len() as u32);
    let values: Vec<f64> = (0..total).into_par_iter().map(|i| f(&grid.node(i))).collect::<Result<_>>()?;
    let (best, &v) = values
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    if !v.is_finite() {
        return Err(Error::NonFinite("grid objective".into()));
    }
    let x = grid.node(best);
    if !grid.refine {
        return Ok((x, v));
    }
    refine(grid, f, x, v)
}

/// Coordinate golden-section ascent inside the grid cell around `x`.
fn refine(
    grid: &GridSpec,
    f: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    mut x: Vec<f64>,
    mut v: f64,
) -> Result<(Vec<f64>, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let lo: Vec<f64> = (0..x.len()).map(|d| (x[d] - grid.step(d)).max(grid.lo[d])).collect();
    let hi: Vec<f64> = (0..x.len()).map(|d| (x[d] + grid.step(d)).min(grid.hi[d])).collect();
    for _ in 0..40 {
        let before = v;
        for d in 0..x.len() {
            let (mut a, mut b) = (lo[d], hi[d]);
            let mut probe = x.clone();
            let mut at = |t: f64| -> Result<f64> {
                probe[d] = t;
                f(&probe)
            };
            for _ in 0..60 {
                let c = b - r * (b - a);
                let e = a + r * (b - a);
                if at(c)? >= at(e)? {
                    b = e;
                } else {
                    a = c;
                }
            }
            let t = 0.5 * (a + b);
            let vt = at(t)?;
            if vt > v {
                x[d] = t;
                v = vt;
            }
        }
        if v - before <= 1e-15 * v.abs().max(1.0) {
            break;
        }
    }
    Ok((x, v))
}

/// Grid argmaxes of `J` and `h_σ = J − σG` at φ, and the resulting `Φσ(φ)`.
/// Uses the problem's deterministic `upper_value` and `lower_value`.
pub fn brute_force_inner<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamVec,
    sigma: f64,
    grid: &GridSpec,
) -> Result<InnerSolution> {
    grid.validate(problem.lambda_dim())?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let j = |l: &[f64]| problem.lower_value(phi, &ParamVec::from_slice(l)?);
    let h = |l: &[f64]| {
        let lv = ParamVec::from_slice(l)?;
        Ok(problem.lower_value(phi, &lv)? - sigma * problem.upper_value(phi, &lv)?)
    };
    let (ls, j_star) = grid_argmax(grid, &j)?;
    let (lss, _) = grid_argmax(grid, &h)?;
    let lambda_star_sigma = ParamVec::new(lss)?;
    let g = problem.upper_value(phi, &lambda_star_sigma)?;
    let j_sigma = problem.lower_value(phi, &lambda_star_sigma)?;
    Ok(InnerSolution {
        boundary: grid.on_boundary(&ls) || grid.on_boundary(lambda_star_sigma.as_slice()),
        lambda_star: ParamVec::new(ls)?,
        lambda_star_sigma,
        j_star,
        phi_sigma: g + (j_star - j_sigma) / sigma,
    })
}

/// Central differences of the brute-force `Φσ` in φ.
pub fn brute_force_phi_sigma_grad<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamVec,
    sigma: f64,
    grid: &GridSpec,
    eps: f64,
) -> Result<ParamVec> {
    central_fd_grad(|p| Ok(brute_force_inner(problem, p, sigma, grid)?.phi_sigma), phi, eps)
}

/// Squared errors of the three hypergradient ingredients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorTerms {
    /// ‖∇φĜ(φ, λ′^K) − ∇φG(φ, λ*_σ)‖²
    pub g_term: f64,
    /// ‖∇φĴ(φ, λ^K) − ∇φJ(φ, λ*)‖²
    pub j_star_term: f64,
    /// ‖∇φĴ(φ, λ′^K) − ∇φJ(φ, λ*_σ)‖²
    pub j_sigma_term: f64,
    /// `3·g_term + 3·(j_star_term + j_sigma_term)/σ²`, the bound on
    /// ‖d − ∇Φσ(φ)‖² the three terms imply.
    pub weighted_sum: f64,
}

/// Compares the estimator outputs at `(λ^K, λ′^K)` against exact gradients at
/// the grid argmaxes. Estimator streams follow the hypergradient layout: child
/// 0 of `rng` for ∇φĜ, child 1 shared by both ∇φĴ calls.
pub fn error_decomposition<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamVec,
    lambda_k: &ParamVec,
    lambda_prime_k: &ParamVec,
    cfg: &PenaltyConfig,
    grid: &GridSpec,
    rng: &RngStream,
) -> Result<ErrorTerms> {
    let inner = brute_force_inner(problem, phi, cfg.sigma, grid)?;
    let budget = cfg.budget();
    let g_hat = problem.stochastic_grad(GradTarget::PhiG, phi, lambda_prime_k, &budget, &rng.spawn(0))?;
    let shared = rng.spawn(1);
    let j_hat = problem.stochastic_grad(GradTarget::PhiJ, phi, lambda_k, &budget, &shared)?;
    let j_hat_sigma = problem.stochastic_grad(GradTarget::PhiJ, phi, lambda_prime_k, &budget, &shared)?;
    let g = problem.exact_grad(GradTarget::PhiG, phi, &inner.lambda_star_sigma)?;
    let j = problem.exact_grad(GradTarget::PhiJ, phi, &inner.lambda_star)?;
    let j_sigma = problem.exact_grad(GradTarget::PhiJ, phi, &inner.lambda_star_sigma)?;
    let g_term = g_hat.sub(&g)?.norm_sq();
    let j_star_term = j_hat.sub(&j)?.norm_sq();
    let j_sigma_term = j_hat_sigma.sub(&j_sigma)?.norm_sq();
    let s2 = cfg.sigma * cfg.sigma;
    Ok(ErrorTerms {
        g_term,
        j_star_term,
        j_sigma_term,
        weighted_sum: 3.0 * g_term + 3.0 * (j_star_term + j_sigma_term) / s2,
    })
}

/// Truncation error of the exact truncated reward gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationCurve {
    pub horizons: Vec<usize>,
    /// `‖∇φJ_H − ∇φJ_{H_max}‖` for each horizon.
    pub errors: Vec<f64>,
    /// Least-squares slope of `ln error` against `H` over the horizons below
    /// `H_max` with positive error; `None` with fewer than two such points.
    pub log_slope: Option<f64>,
}

/// Truncation curve against the largest listed horizon.
pub fn truncation_curve(env: &MdpSpec, policy: &Policy, reward: &RewardModel, horizons: &[usize]) -> Result<TruncationCurve> {
    let h_max = *horizons.iter().max().ok_or_else(|| Error::invalid("horizon list is empty"))?;
    if horizons.contains(&0) {
        return Err(Error::invalid("horizons must be at least 1"));
    }
    let reference = grad_phi_j_exact(env, policy, reward, Some(h_max))?;
    let errors: Vec<f64> = horizons
        .iter()
        .map(|&h| Ok(grad_phi_j_exact(env, policy, reward, Some(h))?.sub(&reference)?.norm()))
        .collect::<Result<_>>()?;
    let pts: Vec<(f64, f64)> = horizons
        .iter()
        .zip(&errors)
        .filter(|(&h, &e)| h < h_max && e > 0.0)
        .map(|(&h, &e)| (h as f64, e.ln()))
        .collect();
    Ok(TruncationCurve { horizons: horizons.to_vec(), errors, log_slope: fit_slope(&pts) })
}

/// Ordinary least-squares slope.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

type ObjectiveFn = Box<dyn Fn(&ParamVec) -> Result<f64> + Sync>;
type GradientFn = Box<dyn Fn(&ParamVec) -> Result<ParamVec> + Sync>;
type SamplerFn = Box<dyn Fn(&mut RngStream) -> ParamVec + Sync>;

/// An analytic gradient registered for checking against finite differences.
pub struct GradCheck {
    pub name: String,
    pub value: ObjectiveFn,
    pub grad: GradientFn,
    /// Draws a random evaluation point.
    pub sampler: SamplerFn,
    pub fd_eps: f64,
}

impl GradCheck {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&ParamVec) -> Result<f64> + Sync + 'static,
        grad: impl Fn(&ParamVec) -> Result<ParamVec> + Sync + 'static,
        sampler: impl Fn(&mut RngStream) -> ParamVec + Sync + 'static,
        fd_eps: f64,
    ) -> Self {
        GradCheck { name: name.into(), value: Box::new(value), grad: Box::new(grad), sampler: Box::new(sampler), fd_eps }
    }

    /// Multiplies the analytic gradient by `factor` (negative control).
    pub fn corrupted(self, factor: f64) -> Self {
        let GradCheck { name, value, grad, sampler, fd_eps } = self;
        GradCheck {
            name,
            value,
            grad: Box::new(move |x| grad(x)?.scaled(factor)),
            sampler,
            fd_eps,
        }
    }
}

/// Outcome of one registered check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Evaluates the check at `points` random points (point `i` drawn from child
/// `i` of `rng`) and reports the worst relative error.
pub fn run_grad_check(check: &GradCheck, points: usize, tolerance: f64, rng: &RngStream) -> Result<GradCheckResult> {
    let mut worst = 0.0f64;
    for i in 0..points {
        let x = (check.sampler)(&mut rng.spawn(i as u64));
        let analytic = (check.grad)(&x)?;
        let fd = central_fd_grad(&check.value, &x, check.fd_eps)?;
        worst = worst.max(relative_error(&analytic, &fd)?);
    }
    Ok(GradCheckResult { name: check.name.clone(), points, max_rel_error: worst, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: f64) -> ParamVec {
        ParamVec::new(vec![v]).unwrap()
    }

    #[test]
    fn fd_examples() {
        let g = central_fd_grad(|x| Ok(x.get(0).powi(2)), &p(1.0), 1e-5).unwrap();
        assert!((g.get(0) - 2.0).abs() < 1e-8);
        let g = central_fd_grad(|_| Ok(3.0), &p(1.0), 1e-5).unwrap();
        assert_eq!(g.get(0), 0.0);
        let g = central_fd_grad(|x| Ok(x.get(0).sin()), &p(0.0), 1e-5).unwrap();
        assert!((g.get(0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fd_rejects_non_finite() {
        assert!(central_fd_grad(|_| Ok(f64::NAN), &p(0.0), 1e-5).is_err());
        assert!(central_fd_grad(|_| Ok(0.0), &p(0.0), 0.0).is_err());
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 - 0.5 * i as f64)).collect();
        assert!((fit_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert!(fit_slope(&pts[..1]).is_none());
    }
}
