//! Configuration, experiment orchestration and artifact persistence.
//!
//! A run directory holds `manifest.toml` (the validated configuration with
//! overrides applied; it re-parses to the same configuration), the
//! experiment's CSV files, `metrics.csv` (`key,value`) and optional SVG plots.
//! A `.lock` file guards the directory while a run is writing to it.

mod config;
mod gradcheck;
mod plot;

pub use config::{
    BrlConfig, EnvKind, ExperimentKind, GradcheckConfig, InitConfig, Lemma1Config, LemmaFunction, PairModeKind,
    RunConfig, StandardConfig, SweepConfig, SCHEMA_VERSION,
};
pub use gradcheck::{build_check, FD_EPS, OBJECTIVES};
pub use plot::{line_plot, Series};

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::diagnostics::run_grad_check;
use crate::error::{Error, Result};
use crate::mdp_env::{FeatureTable, MdpSpec, Policy, RewardFeatures, RewardModel};
use crate::param::ParamVec;
use crate::penalty_algo::{run_algorithm1, BrlProblem, PairMode, PenaltyConfig, RunRecord, RunRow};
use crate::pl_sgd_lab::{certify_lemma, measure_pl_constant, BiasField, BiasedOracle, DomainBox, PlFunction};
use crate::preference::{bt_accuracy, make_pairs, write_pairs, Labeler, SpaceKind};
use crate::problem::{BilevelProblem, Regime};
use crate::rng::RngStream;
use crate::synthetic_bilevel::{stationarity_metric, SyntheticProblem};

/// Environment variable naming the default root of run directories.
pub const OUT_ROOT_ENV: &str = "PBRL_OUT_ROOT";

const MANIFEST: &str = "manifest.toml";
const RECORD: &str = "record.csv";
const METRICS: &str = "metrics.csv";
const LEMMA: &str = "lemma.csv";
const GRADCHECK: &str = "gradcheck.csv";
const SWEEP: &str = "sweep.csv";
const REPORT: &str = "report.txt";
const PAIRS: &str = "pairs.txt";

const INITIAL_PAIRS_STREAM: u64 = 3;
const HELDOUT_STREAM: u64 = 7;
const GRADCHECK_STREAM: u64 = 11;

/// Command-line overrides.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub plots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: None, out: None, plots: true }
    }
}

/// What a finished command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub out_dir: PathBuf,
    /// Human-readable summary lines.
    pub summary: String,
    /// Set when the run aborted or a check failed; artifacts are still written.
    pub failure: Option<String>,
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
    RunConfig::parse(&text)
}

/// Applies the command-line overrides to a configuration.
pub fn apply_overrides(cfg: &RunConfig, opts: &RunOptions) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--out`, then `out` in the config, then `$PBRL_OUT_ROOT/<experiment>-<seed>`,
/// then `runs/<experiment>-<seed>`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cfg.out {
        return out.clone();
    }
    let leaf = format!("{}-{}", cfg.experiment.name(), cfg.seed);
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(leaf),
        _ => PathBuf::from("runs").join(leaf),
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match File::options().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "output directory {} is in use (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Runs the configured experiment after applying `opts`.
pub fn execute(cfg: &RunConfig, opts: &RunOptions) -> Result<Outcome> {
    let cfg = apply_overrides(cfg, opts)?;
    let dir = output_dir(&cfg);
    execute_in(&cfg, &dir, opts.plots)
}

fn execute_in(cfg: &RunConfig, dir: &Path, plots: bool) -> Result<Outcome> {
    let _lock = OutputLock::acquire(dir)?;
    fs::write(dir.join(MANIFEST), cfg.to_toml()?)?;
    let (summary, failure) = match cfg.experiment {
        ExperimentKind::Brl => run_brl(cfg, dir, plots)?,
        ExperimentKind::Standard => run_standard(cfg, dir, plots)?,
        ExperimentKind::Lemma1 => run_lemma1(cfg, dir, plots)?,
        ExperimentKind::Gradcheck => run_gradcheck(cfg, dir)?,
        ExperimentKind::Sweep => run_sweep(cfg, dir, plots)?,
    };
    Ok(Outcome { out_dir: dir.to_path_buf(), summary, failure })
}

/// Runs only the gradient checks described by `cfg` (defaults when the
/// config has no `[gradcheck]` section).
pub fn execute_gradcheck(cfg: &RunConfig, opts: &RunOptions) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.experiment = ExperimentKind::Gradcheck;
    if cfg.gradcheck.is_none() {
        cfg.gradcheck = Some(GradcheckConfig::default());
    }
    execute(&cfg, opts)
}

/// Starting iterates from `[init]`, checked against the problem dimensions.
pub fn init_vectors(cfg: &RunConfig, phi_dim: usize, lambda_dim: usize) -> Result<(ParamVec, ParamVec, ParamVec)> {
    let init = cfg.init.clone().unwrap_or_default();
    let vec_or_zero = |v: &Option<Vec<f64>>, dim: usize, name: &str| -> Result<ParamVec> {
        match v {
            None => Ok(ParamVec::zeros(dim)),
            Some(v) if v.len() == dim => ParamVec::from_slice(v),
            Some(v) => Err(Error::invalid(format!("{name} has {} entries, expected {dim}", v.len()))),
        }
    };
    let phi0 = vec_or_zero(&init.phi0, phi_dim, "phi0")?;
    let lambda0 = vec_or_zero(&init.lambda0, lambda_dim, "lambda0")?;
    let lambda_prime0 = match &init.lambda_prime0 {
        None => lambda0.clone(),
        some => vec_or_zero(some, lambda_dim, "lambda_prime0")?,
    };
    Ok((phi0, lambda0, lambda_prime0))
}

/// Builds the BRL instance described by `b`. γ and β come from `solver`.
/// In buffer mode, `initial_pairs` pairs from the reference policy seed the
/// buffer; with `persist`, the dataset is written there and grows as pairs
/// are collected.
pub fn build_brl_problem(b: &BrlConfig, solver: &PenaltyConfig, seed: u64, persist: Option<&Path>) -> Result<BrlProblem> {
    let (env, policy, features) = match b.env {
        EnvKind::Chain => {
            let env = MdpSpec::chain(b.states, b.slip, solver.gamma)?;
            let policy = Policy::softmax(ParamVec::zeros(b.states), FeatureTable::binary_logits(b.states), b.policy_floor)?;
            (env, policy, RewardFeatures::Table(FeatureTable::one_hot(b.states, 2)))
        }
        EnvKind::Lq1d => {
            if !(b.action_bound > 0.0) {
                return Err(Error::invalid("action_bound must be positive"));
            }
            let env = MdpSpec::lq1d(solver.gamma)?;
            let policy = Policy::gaussian(ParamVec::zeros(2), b.policy_std)?;
            (env, policy, RewardFeatures::Polynomial1d { action_bound: b.action_bound })
        }
    };
    let dim = features.dim();
    if b.true_phi.len() != dim {
        return Err(Error::invalid(format!("true_phi has {} entries, expected {dim}", b.true_phi.len())));
    }
    let true_reward = RewardModel::new(ParamVec::from_slice(&b.true_phi)?, features.clone(), solver.beta, b.squash)?;
    let reward = RewardModel::new(ParamVec::zeros(dim), features, solver.beta, b.squash)?;
    let labeler = Labeler::new(true_reward, b.label_mode);
    let reference = policy.reference();
    let kind = if env.is_finite() { SpaceKind::Discrete } else { SpaceKind::Continuous };
    let mut problem = BrlProblem::new(env.clone(), policy, reference.clone(), reward, labeler.clone(), b.pref_horizon)?
        .with_q_rollouts(b.q_rollouts)?;
    if let Some(bound) = b.lambda_bound {
        problem = problem.with_lambda_bound(bound)?;
    }
    if b.pair_mode == PairModeKind::Buffer {
        let initial = if b.initial_pairs > 0 {
            let rng = RngStream::new(seed, INITIAL_PAIRS_STREAM);
            make_pairs(&env, &reference, &labeler, b.initial_pairs, b.pref_horizon, &rng)?
        } else {
            Vec::new()
        };
        if let Some(path) = persist {
            write_pairs(BufWriter::new(File::create(path)?), kind, &initial)?;
            problem = problem.with_persistence(path.to_path_buf());
        }
        problem = problem.with_pair_mode(PairMode::Buffer { refresh_count: b.refresh_count }).with_buffer(initial);
    }
    Ok(problem)
}

/// Fraction of `count` held-out pairs (from the reference policy) that the
/// reward at `phi` ranks like the true reward.
pub fn heldout_accuracy(problem: &BrlProblem, phi: &ParamVec, count: usize, seed: u64) -> Result<f64> {
    let rng = RngStream::new(seed, HELDOUT_STREAM);
    let pairs = make_pairs(problem.env(), problem.policy_ref(), problem.labeler(), count, problem.pref_horizon(), &rng)?;
    bt_accuracy(&problem.reward_at(phi)?, &problem.labeler().true_reward, &pairs)
}

/// Sample count of `t` outer iterations: `n·K·T + B·K·H·T + B·H·T` in the BRL
/// regime, `B·K·T + B·T` in the standard regime.
pub fn formula_samples(cfg: &PenaltyConfig, regime: Regime, t: usize) -> u64 {
    let (n, k, b, h, t) = (cfg.n as u64, cfg.k as u64, cfg.b as u64, cfg.h as u64, t as u64);
    match regime {
        Regime::Brl => n * k * t + b * k * h * t + b * h * t,
        Regime::Standard => b * k * t + b * t,
    }
}

/// Means of `‖d_t‖²` over the first and last quarters of the rows.
pub fn quarter_means(rows: &[RunRow]) -> Option<(f64, f64)> {
    let q = rows.len() / 4;
    if q == 0 {
        return None;
    }
    let mean = |r: &[RunRow]| r.iter().map(|x| x.d_norm * x.d_norm).sum::<f64>() / r.len() as f64;
    Some((mean(&rows[..q]), mean(&rows[rows.len() - q..])))
}

fn write_metrics(dir: &Path, metrics: &[(String, String)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(METRICS))?);
    writeln!(out, "key,value")?;
    for (k, v) in metrics {
        writeln!(out, "{k},{v}")?;
    }
    out.flush()?;
    Ok(())
}

fn record_plots(dir: &Path, rows: &[RunRow]) -> Result<()> {
    let d2 = Series { name: "|d_t|^2", points: rows.iter().map(|r| (r.t as f64, r.d_norm * r.d_norm)).collect() };
    fs::write(dir.join("grad_norm.svg"), line_plot("Hypergradient norm", "outer iteration", "|d_t|^2", &[d2], true))?;
    let inner = [
        Series { name: "lambda stream", points: rows.iter().map(|r| (r.t as f64, r.inner_d_norm)).collect() },
        Series { name: "lambda' stream", points: rows.iter().map(|r| (r.t as f64, r.inner_dp_norm)).collect() },
    ];
    fs::write(dir.join("inner_gap.svg"), line_plot("Inner-loop gradient norm", "outer iteration", "|d_K|", &inner, true))?;
    Ok(())
}

fn record_metrics(record: &RunRecord) -> Vec<(String, String)> {
    let mut m = vec![
        ("outer_iterations".to_string(), record.rows.len().to_string()),
        ("total_samples".to_string(), record.total_samples().to_string()),
        ("formula_samples".to_string(), formula_samples(&record.config, record.regime, record.rows.len()).to_string()),
    ];
    if let Some(last) = record.rows.last() {
        m.push(("final_d_norm".into(), format!("{:?}", last.d_norm)));
        m.push(("final_upper_loss".into(), format!("{:?}", last.upper_loss)));
        m.push(("final_lower_value".into(), format!("{:?}", last.lower_value)));
    }
    if let Some((first, last)) = quarter_means(&record.rows) {
        m.push(("first_quarter_d2".into(), format!("{first:?}")));
        m.push(("last_quarter_d2".into(), format!("{last:?}")));
    }
    for (i, v) in record.final_phi.iter().enumerate() {
        m.push((format!("final_phi_{i}"), format!("{v:?}")));
    }
    m
}

fn persist_record(dir: &Path, record: &RunRecord, plots: bool) -> Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(RECORD))?);
    record.write_csv(&mut out)?;
    out.flush()?;
    if plots {
        record_plots(dir, &record.rows)?;
    }
    Ok(())
}

fn record_summary(record: &RunRecord) -> String {
    let mut s = format!("outer iterations: {}\ntotal samples: {}\n", record.rows.len(), record.total_samples());
    if let Some(last) = record.rows.last() {
        s += &format!("final |d|: {:.6e}\nfinal phi: {}\n", last.d_norm, record.final_phi);
    }
    if let Some(reason) = &record.aborted {
        s += &format!("aborted: {reason}\n");
    }
    s
}

fn run_brl(cfg: &RunConfig, dir: &Path, plots: bool) -> Result<(String, Option<String>)> {
    let solver = cfg.resolved_solver()?;
    let b = cfg.brl.as_ref().ok_or_else(|| Error::invalid("missing [brl] section"))?;
    let pairs_path = dir.join(PAIRS);
    let persist = (b.pair_mode == PairModeKind::Buffer).then_some(pairs_path.as_path());
    let mut problem = build_brl_problem(b, &solver, cfg.seed, persist)?;
    let (phi0, lambda0, lambda_prime0) = init_vectors(cfg, problem.phi_dim(), problem.lambda_dim())?;
    let record = run_algorithm1(&mut problem, &solver, &phi0, &lambda0, &lambda_prime0, cfg.seed)?;
    persist_record(dir, &record, plots)?;
    let mut metrics = vec![("experiment".to_string(), "brl".to_string()), ("seed".to_string(), cfg.seed.to_string())];
    metrics.extend(record_metrics(&record));
    let mut summary = record_summary(&record);
    if b.heldout_pairs > 0 && record.aborted.is_none() {
        let acc = heldout_accuracy(&problem, &record.final_phi, b.heldout_pairs, cfg.seed)?;
        metrics.push(("heldout_accuracy".into(), format!("{acc:?}")));
        summary += &format!("held-out accuracy: {acc:.4}\n");
    }
    write_metrics(dir, &metrics)?;
    Ok((summary, record.aborted.clone()))
}

fn run_standard(cfg: &RunConfig, dir: &Path, plots: bool) -> Result<(String, Option<String>)> {
    let solver = cfg.resolved_solver()?;
    let s = cfg.standard.as_ref().ok_or_else(|| Error::invalid("missing [standard] section"))?;
    let problem = SyntheticProblem::new(s.instance)?.with_noise(s.noise_g, s.noise_j)?;
    let (phi0, lambda0, lambda_prime0) = init_vectors(cfg, 1, 1)?;
    let mut p = problem.clone();
    let record = run_algorithm1(&mut p, &solver, &phi0, &lambda0, &lambda_prime0, cfg.seed)?;
    persist_record(dir, &record, plots)?;
    let mut metrics =
        vec![("experiment".to_string(), "standard".to_string()), ("seed".to_string(), cfg.seed.to_string())];
    metrics.extend(record_metrics(&record));
    let mut summary = record_summary(&record);
    if !record.rows.is_empty() {
        let metric = stationarity_metric(&problem, &record);
        metrics.push(("mean_hypergrad_sq".into(), format!("{metric:?}")));
        summary += &format!("mean |grad Phi|^2: {metric:.6e}\n");
    }
    write_metrics(dir, &metrics)?;
    Ok((summary, record.aborted.clone()))
}

pub(crate) fn lemma_function(f: LemmaFunction) -> PlFunction {
    match f {
        LemmaFunction::Quadratic => PlFunction::quadratic(),
        LemmaFunction::Sinsq => PlFunction::sinsq(),
    }
}

fn run_lemma1(cfg: &RunConfig, dir: &Path, plots: bool) -> Result<(String, Option<String>)> {
    let l = cfg.lemma1.as_ref().ok_or_else(|| Error::invalid("missing [lemma1] section"))?;
    let f = lemma_function(l.function);
    let mu = match l.mu {
        Some(mu) => mu,
        None => measure_pl_constant(&f, &DomainBox::interval(l.grid_lo, l.grid_hi)?, l.grid_step)?.mu,
    };
    let oracle = match l.beta {
        None => BiasedOracle::scalar(l.bias, l.noise)?,
        Some(beta) => {
            let field = if l.bias == 0.0 { BiasField::Zero } else { BiasField::Constant(vec![l.bias]) };
            BiasedOracle::new(field, l.noise, beta)?
        }
    };
    let cert = certify_lemma(&f, &oracle, &ParamVec::new(vec![l.x0])?, l.eta, mu, l.steps, l.seeds, l.slack, cfg.seed)?;
    let mut out = BufWriter::new(File::create(dir.join(LEMMA))?);
    writeln!(out, "step,gap,envelope")?;
    for t in 1..cert.mean_gaps.len() {
        writeln!(out, "{t},{:?},{:?}", cert.mean_gaps[t], cert.envelope[t])?;
    }
    writeln!(out, "floor,{:?},{:?}", cert.floor_estimate, cert.floor_bound)?;
    out.flush()?;
    if plots {
        lemma_plot(dir, &cert.mean_gaps[1..], &cert.envelope[1..], cert.slack)?;
    }
    let c = cert.constants;
    write_metrics(
        dir,
        &[
            ("experiment".into(), "lemma1".into()),
            ("seed".into(), cfg.seed.to_string()),
            ("mu".into(), format!("{:?}", c.mu)),
            ("smooth_l".into(), format!("{:?}", c.smooth_l)),
            ("eta".into(), format!("{:?}", c.eta)),
            ("beta".into(), format!("{:?}", c.beta)),
            ("violations".into(), cert.violations.to_string()),
            ("floor_estimate".into(), format!("{:?}", cert.floor_estimate)),
            ("floor_bound".into(), format!("{:?}", cert.floor_bound)),
            ("passed".into(), cert.passed().to_string()),
        ],
    )?;
    let summary = format!(
        "mu: {:.6}\nenvelope violations: {} of {} steps (slack {})\nfloor: {:.6e} (bound {:.6e})\n",
        c.mu, cert.violations, l.steps, cert.slack, cert.floor_estimate, cert.floor_bound
    );
    let failure = (!cert.passed()).then(|| {
        format!("certification failed: {} envelope violations, floor held: {}", cert.violations, cert.floor_holds())
    });
    Ok((summary, failure))
}

fn lemma_plot(dir: &Path, gaps: &[f64], envelope: &[f64], slack: f64) -> Result<()> {
    let series = [
        Series { name: "mean gap", points: gaps.iter().enumerate().map(|(i, g)| ((i + 1) as f64, *g)).collect() },
        Series {
            name: "slack x envelope",
            points: envelope.iter().enumerate().map(|(i, e)| ((i + 1) as f64, slack * e)).collect(),
        },
    ];
    fs::write(dir.join("gap.svg"), line_plot("Optimality gap", "step", "f(x_t) - f*", &series, true))?;
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, dir: &Path) -> Result<(String, Option<String>)> {
    let g = cfg.gradcheck.clone().unwrap_or_default();
    let names: Vec<String> = g.objectives.clone().unwrap_or_else(|| OBJECTIVES.iter().map(|s| s.to_string()).collect());
    let root = RngStream::new(cfg.seed, GRADCHECK_STREAM);
    let mut out = BufWriter::new(File::create(dir.join(GRADCHECK))?);
    writeln!(out, "objective,points,max_rel_error,tolerance,passed")?;
    let mut summary = String::new();
    let mut failed = Vec::new();
    for name in &names {
        let mut check = build_check(name)?;
        if g.corrupt.as_deref() == Some(name.as_str()) {
            check = check.corrupted(g.corrupt_factor);
        }
        let index = OBJECTIVES.iter().position(|o| o == name).unwrap_or(OBJECTIVES.len());
        let r = run_grad_check(&check, g.points, g.tolerance, &root.spawn(index as u64))?;
        writeln!(out, "{},{},{:?},{:?},{}", r.name, r.points, r.max_rel_error, r.tolerance, r.passed())?;
        summary += &format!(
            "{:<28} max rel error {:.3e} (tol {:.1e}) {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    out.flush()?;
    let failure = (!failed.is_empty()).then(|| format!("gradient check failed for: {}", failed.join(", ")));
    Ok((summary, failure))
}

/// Child configurations of a sweep, in Cartesian order (σ slowest, T fastest),
/// each paired with its directory name.
pub fn sweep_plan(cfg: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    let s = cfg.sweep.as_ref().ok_or_else(|| Error::invalid("missing [sweep] section"))?;
    let mut base = cfg.clone();
    base.experiment = s.kind;
    let solver = base.resolved_solver()?;
    let float_axis = |v: &Option<Vec<f64>>| v.clone().map(|v| v.into_iter().map(Some).collect()).unwrap_or(vec![None]);
    let int_axis = |v: &Option<Vec<usize>>| v.clone().map(|v| v.into_iter().map(Some).collect()).unwrap_or(vec![None]);
    let mut children = Vec::new();
    for sigma in float_axis(&s.sigma) {
        for b in int_axis(&s.b) {
            for k in int_axis(&s.k) {
                for h in int_axis(&s.h) {
                    for t in int_axis(&s.t) {
                        let mut child = base.clone();
                        let mut sc = solver.clone();
                        let mut name = format!("{:03}", children.len());
                        if let Some(v) = sigma {
                            sc.sigma = v;
                            name += &format!("-sigma{v}");
                        }
                        for (label, value, slot) in
                            [("b", b, &mut sc.b), ("k", k, &mut sc.k), ("h", h, &mut sc.h), ("t", t, &mut sc.t)]
                        {
                            if let Some(v) = value {
                                *slot = v;
                                name += &format!("-{label}{v}");
                            }
                        }
                        child.solver = Some(sc);
                        child.epsilon = None;
                        child.schedule = None;
                        child.sweep = None;
                        child.out = None;
                        children.push((name, child));
                    }
                }
            }
        }
    }
    Ok(children)
}

pub(crate) fn sweep_children(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    Ok(sweep_plan(cfg)?.into_iter().map(|(_, c)| c).collect())
}

fn metric_value(dir: &Path, key: &str) -> Option<String> {
    let f = File::open(dir.join(METRICS)).ok()?;
    BufReader::new(f)
        .lines()
        .map_while(std::io::Result::ok)
        .find_map(|l| l.strip_prefix(&format!("{key},")).map(str::to_string))
}

fn run_sweep(cfg: &RunConfig, dir: &Path, plots: bool) -> Result<(String, Option<String>)> {
    let plan = sweep_plan(cfg)?;
    let mut out = BufWriter::new(File::create(dir.join(SWEEP))?);
    writeln!(
        out,
        "child,sigma,b,k,h,t,outer_iterations,total_samples,final_d_norm,last_quarter_d2,final_upper_loss,status"
    )?;
    let mut summary = String::new();
    let mut failed = Vec::new();
    for (name, child) in &plan {
        let child_dir = dir.join(name);
        let outcome = execute_in(child, &child_dir, plots)?;
        let sc = child.solver.as_ref().expect("sweep children carry a solver");
        let get = |k: &str| metric_value(&child_dir, k).unwrap_or_default();
        let status = match &outcome.failure {
            None => "ok".to_string(),
            Some(_) => {
                failed.push(name.clone());
                "aborted".to_string()
            }
        };
        writeln!(
            out,
            "{name},{:?},{},{},{},{},{},{},{},{},{},{status}",
            sc.sigma,
            sc.b,
            sc.k,
            sc.h,
            sc.t,
            get("outer_iterations"),
            get("total_samples"),
            get("final_d_norm"),
            get("last_quarter_d2"),
            get("final_upper_loss"),
        )?;
        summary += &format!("{name}: {status}\n");
    }
    out.flush()?;
    let failure = (!failed.is_empty()).then(|| format!("sweep children failed: {}", failed.join(", ")));
    Ok((summary, failure))
}

/// Summarizes a run directory and writes `report.txt` (and plots unless
/// disabled). Rerunning produces identical files.
pub fn report(dir: &Path, plots: bool) -> Result<String> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let cfg = RunConfig::parse(&manifest)?;
    let mut text = format!("run directory: {}\nexperiment: {}\nseed: {}\n", dir.display(), cfg.experiment.name(), cfg.seed);
    match cfg.experiment {
        ExperimentKind::Brl | ExperimentKind::Standard => {
            let rows = RunRecord::read_csv_rows(File::open(dir.join(RECORD))?)?;
            let solver = cfg.resolved_solver()?;
            text += &record_report(&rows, &solver, cfg.experiment)?;
            if plots {
                record_plots(dir, &rows)?;
            }
        }
        ExperimentKind::Lemma1 => {
            let (gaps, envelope, floor) = read_lemma_csv(&dir.join(LEMMA))?;
            let l = cfg.lemma1.as_ref().ok_or_else(|| Error::invalid("manifest lacks [lemma1]"))?;
            let violations = gaps.iter().zip(&envelope).filter(|(g, e)| **g > l.slack * **e).count();
            text += &format!(
                "steps: {}\nenvelope violations: {violations}\nfloor estimate: {:.6e}\nfloor bound: {:.6e}\n",
                gaps.len(),
                floor.0,
                floor.1
            );
            if plots {
                lemma_plot(dir, &gaps, &envelope, l.slack)?;
            }
        }
        ExperimentKind::Gradcheck => {
            let body = fs::read_to_string(dir.join(GRADCHECK))?;
            let mut lines = body.lines();
            if lines.next() != Some("objective,points,max_rel_error,tolerance,passed") {
                return Err(Error::Parse { line: 1, message: "unexpected gradcheck header".into() });
            }
            for (i, line) in lines.enumerate() {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(Error::Parse { line: i + 2, message: format!("expected 5 fields in `{line}`") });
                }
                text += &format!("{}: max rel error {} (tol {}) passed={}\n", f[0], f[2], f[3], f[4]);
            }
        }
        ExperimentKind::Sweep => {
            let body = fs::read_to_string(dir.join(SWEEP))?;
            let rows = body.lines().skip(1).filter(|l| !l.is_empty()).count();
            if rows == 0 {
                return Err(Error::Parse { line: 2, message: "sweep aggregate has no rows".into() });
            }
            text += &format!("children: {rows}\n");
            for line in body.lines().skip(1) {
                text += &format!("  {line}\n");
            }
        }
    }
    fs::write(dir.join(REPORT), &text)?;
    Ok(text)
}

fn record_report(rows: &[RunRow], solver: &PenaltyConfig, kind: ExperimentKind) -> Result<String> {
    let last = rows.last().ok_or(Error::Parse { line: 2, message: "record has no rows".into() })?;
    let regime = if kind == ExperimentKind::Brl { Regime::Brl } else { Regime::Standard };
    let mut text = format!(
        "outer iterations: {} of {}\nfinal |d|: {:.6e}\nfinal upper loss: {:.6e}\nfinal lower value: {:.6e}\nlast recorded phi: {}\n",
        rows.len(),
        solver.t,
        last.d_norm,
        last.upper_loss,
        last.lower_value,
        last.phi
    );
    if let Some((first, tail)) = quarter_means(rows) {
        text += &format!("mean |d|^2: first quarter {first:.6e}, last quarter {tail:.6e}\n");
    }
    let expected = formula_samples(solver, regime, rows.len());
    let formula = match regime {
        Regime::Brl => "n*K*T + B*K*H*T + B*H*T",
        Regime::Standard => "B*K*T + B*T",
    };
    text += &format!(
        "samples: recorded {}, formula {formula} = {expected} ({})\n",
        last.samples,
        if last.samples == expected { "match" } else { "MISMATCH" }
    );
    if rows.iter().all(|r| r.phi == rows[0].phi) {
        text += "φ stationary: the iterate never moved\n";
    }
    Ok(text)
}

type LemmaCsv = (Vec<f64>, Vec<f64>, (f64, f64));

fn read_lemma_csv(path: &Path) -> Result<LemmaCsv> {
    let body = fs::read_to_string(path)?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, "step,gap,envelope")) => {}
        _ => return Err(Error::Parse { line: 1, message: "unexpected lemma header".into() }),
    }
    let (mut gaps, mut envelope, mut floor) = (Vec::new(), Vec::new(), None);
    for (i, line) in lines {
        let err = |m: String| Error::Parse { line: i + 1, message: m };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields in `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        if f[0] == "floor" {
            floor = Some((num(f[1])?, num(f[2])?));
        } else {
            gaps.push(num(f[1])?);
            envelope.push(num(f[2])?);
        }
    }
    let floor = floor.ok_or(Error::Parse { line: body.lines().count(), message: "missing floor line".into() })?;
    Ok((gaps, envelope, floor))
}
