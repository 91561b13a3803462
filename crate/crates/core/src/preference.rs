//! Bradley–Terry preference objective over trajectory pairs.
//!
//! A pair `(τ0, τ1, y)` carries `y = 1` when `τ0` is preferred. Under reward
//! `r_φ` the model assigns `P_φ(τ0 ≻ τ1) = σ(R0 − R1)` with `R_k` the
//! undiscounted segment reward, and the upper loss is the negative expected
//! agreement `−(y·P + (1−y)(1−P))`, which lies in `[−1, 0]`.
//!
//! Pair datasets persist as plain text:
//!
//! ```text
//! # pbrl-pairs v1 space=discrete
//! H y s_1 a_1 ... s_H a_H s'_1 a'_1 ... s'_H a'_H
//! ```
//!
//! one record per line, `τ0` before `τ1`. Reals use Rust's shortest
//! round-trip formatting, so reading back reproduces every value bit-exactly.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::par_ordered_sum;
use crate::mdp_env::{
    policy_table, rollout_segment, Action, MdpSpec, Policy, RewardModel, Segment, State,
};
use crate::param::{check_finite, ParamVec};
use crate::rng::RngStream;

/// Two segments of equal horizon and a label (`1` means `seg0` preferred).
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub seg0: Segment,
    pub seg1: Segment,
    pub label: u8,
}

impl PreferencePair {
    pub fn new(seg0: Segment, seg1: Segment, label: u8) -> Result<Self> {
        if seg0.len() != seg1.len() || seg0.is_empty() {
            return Err(Error::invalid(format!(
                "pair segments must share a positive horizon, got {} and {}",
                seg0.len(),
                seg1.len()
            )));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        Ok(PreferencePair { seg0, seg1, label })
    }

    pub fn horizon(&self) -> usize {
        self.seg0.len()
    }
}

/// How the synthetic labeler turns true rewards into labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `y ~ Bernoulli(P_true(τ0 ≻ τ1))`.
    Bernoulli,
    /// `y = 1` iff `R0 ≥ R1` under the true reward; ties go to `τ0`.
    Deterministic,
}

/// Simulated annotator holding the hidden ground-truth reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeler {
    pub true_reward: RewardModel,
    pub mode: LabelMode,
}

impl Labeler {
    pub fn new(true_reward: RewardModel, mode: LabelMode) -> Self {
        Labeler { true_reward, mode }
    }

    /// Probability that the label is `1`.
    pub fn label_probability(&self, seg0: &Segment, seg1: &Segment) -> Result<f64> {
        match self.mode {
            LabelMode::Bernoulli => bt_probability(&self.true_reward, seg0, seg1),
            LabelMode::Deterministic => {
                let r0 = segment_reward(&self.true_reward, seg0)?;
                let r1 = segment_reward(&self.true_reward, seg1)?;
                Ok(if r0 >= r1 { 1.0 } else { 0.0 })
            }
        }
    }

    pub fn label(&self, seg0: &Segment, seg1: &Segment, rng: &mut RngStream) -> Result<u8> {
        let p = self.label_probability(seg0, seg1)?;
        Ok(match self.mode {
            LabelMode::Bernoulli => u8::from(rng.uniform() < p),
            LabelMode::Deterministic => u8::from(p == 1.0),
        })
    }
}

/// `R = Σ_h r_φ(s_h, a_h)`.
pub fn segment_reward(reward: &RewardModel, seg: &Segment) -> Result<f64> {
    let mut total = 0.0;
    for (s, a) in seg.steps() {
        total += reward.base_reward(s, a)?;
    }
    Ok(total)
}

fn add_segment_reward_grad(reward: &RewardModel, seg: &Segment, w: f64, out: &mut [f64]) -> Result<()> {
    for (s, a) in seg.steps() {
        reward.add_reward_grad(s, a, w, out)?;
    }
    Ok(())
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `P_φ(τ0 ≻ τ1) = exp(R0) / (exp(R0) + exp(R1))`.
pub fn bt_probability(reward: &RewardModel, seg0: &Segment, seg1: &Segment) -> Result<f64> {
    if seg0.len() != seg1.len() {
        return Err(Error::invalid("preference segments must share a horizon"));
    }
    Ok(logistic(segment_reward(reward, seg0)? - segment_reward(reward, seg1)?))
}

fn pair_loss(label: f64, p: f64) -> f64 {
    -(label * p + (1.0 - label) * (1.0 - p))
}

/// Empirical mean of `−(y·P + (1−y)(1−P))`.
pub fn upper_loss_g(reward: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("upper loss needs at least one pair"));
    }
    let mut total = 0.0;
    for pair in pairs {
        total += pair_loss(pair.label as f64, bt_probability(reward, &pair.seg0, &pair.seg1)?);
    }
    Ok(total / pairs.len() as f64)
}

fn add_pair_grad_phi(reward: &RewardModel, pair: &PreferencePair, w: f64, out: &mut [f64]) -> Result<()> {
    let p = bt_probability(reward, &pair.seg0, &pair.seg1)?;
    let c = -w * (2.0 * pair.label as f64 - 1.0) * p * (1.0 - p);
    if c != 0.0 {
        add_segment_reward_grad(reward, &pair.seg0, c, out)?;
        add_segment_reward_grad(reward, &pair.seg1, -c, out)?;
    }
    Ok(())
}

/// Full-set gradient of [`upper_loss_g`] w.r.t. φ.
pub fn grad_phi_g_full(reward: &RewardModel, pairs: &[PreferencePair]) -> Result<ParamVec> {
    if pairs.is_empty() {
        return Err(Error::invalid("upper gradient needs at least one pair"));
    }
    let mut out = vec![0.0; reward.dim()];
    let w = 1.0 / pairs.len() as f64;
    for pair in pairs {
        add_pair_grad_phi(reward, pair, w, &mut out)?;
    }
    check_finite(&out, "grad_phi_G")?;
    ParamVec::new(out)
}

/// `(1/B) Σ −(2y−1)·P(1−P)·(∇φR0 − ∇φR1)` over a size-`B` subsample drawn
/// without replacement.
pub fn grad_phi_g(reward: &RewardModel, pairs: &[PreferencePair], b: usize, rng: &RngStream) -> Result<ParamVec> {
    if b == 0 || b > pairs.len() {
        return Err(Error::invalid(format!("subsample size {b} must lie in 1..={}", pairs.len())));
    }
    let mut r = rng.spawn(0);
    let mut picked = index::sample(&mut r, pairs.len(), b).into_vec();
    picked.sort_unstable();
    let mut out = vec![0.0; reward.dim()];
    let w = 1.0 / b as f64;
    for i in picked {
        add_pair_grad_phi(reward, &pairs[i], w, &mut out)?;
    }
    check_finite(&out, "grad_phi_G")?;
    ParamVec::new(out)
}

/// `count` pairs of independent horizon-`h` rollouts from `π_λ`, labeled by
/// `labeler`. Pair `k` uses child stream `k` of `rng`.
pub fn make_pairs(
    env: &MdpSpec,
    policy: &Policy,
    labeler: &Labeler,
    count: usize,
    h: usize,
    rng: &RngStream,
) -> Result<Vec<PreferencePair>> {
    if count == 0 || h == 0 {
        return Err(Error::invalid("pair count and horizon must be at least 1"));
    }
    (0..count)
        .into_par_iter()
        .map(|k| {
            let root = rng.spawn(k as u64);
            let seg0 = rollout_segment(env, policy, h, None, &mut root.spawn(0))?;
            let seg1 = rollout_segment(env, policy, h, None, &mut root.spawn(1))?;
            let label = labeler.label(&seg0, &seg1, &mut root.spawn(2))?;
            Ok(PreferencePair { seg0, seg1, label })
        })
        .collect()
}

fn add_segment_score(policy: &Policy, seg: &Segment, w: f64, out: &mut [f64]) -> Result<()> {
    for (s, a) in seg.steps() {
        policy.add_grad_log_prob(s, a, w, out)?;
    }
    Ok(())
}

/// Score-function estimate of ∇λG from `B` fresh labeled pairs:
/// `(1/B) Σ ℓ(y, τ0, τ1)·(Σ_h ∇log π(a⁰_h|s⁰_h) + Σ_h ∇log π(a¹_h|s¹_h))`.
pub fn grad_lambda_g(
    env: &MdpSpec,
    policy: &Policy,
    reward: &RewardModel,
    labeler: &Labeler,
    b: usize,
    h: usize,
    rng: &RngStream,
) -> Result<ParamVec> {
    if b == 0 || h == 0 {
        return Err(Error::invalid("batch size and horizon must be at least 1"));
    }
    let out = par_ordered_sum(b, policy.dim(), |k, acc| {
        let root = rng.spawn(k as u64);
        let seg0 = rollout_segment(env, policy, h, None, &mut root.spawn(0))?;
        let seg1 = rollout_segment(env, policy, h, None, &mut root.spawn(1))?;
        let y = labeler.label(&seg0, &seg1, &mut root.spawn(2))?;
        let loss = pair_loss(y as f64, bt_probability(reward, &seg0, &seg1)?);
        let w = loss / b as f64;
        add_segment_score(policy, &seg0, w, acc)?;
        add_segment_score(policy, &seg1, w, acc)
    })?;
    check_finite(&out, "grad_lambda_G")?;
    ParamVec::new(out)
}

/// Every horizon-`h` segment of a finite environment with its probability
/// under `π_λ` and `ν`. Zero-probability paths are dropped.
pub fn enumerate_segments(env: &MdpSpec, policy: &Policy, h: usize) -> Result<Vec<(Segment, f64)>> {
    if h == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let t = env.tabular()?;
    let pi = policy_table(env, policy)?;
    let (ns, na) = (t.n_states(), t.n_actions());
    let mut frontier: Vec<(Vec<usize>, Vec<usize>, f64)> = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            let p = t.init()[s] * pi[s * na + a];
            if p > 0.0 {
                frontier.push((vec![s], vec![a], p));
            }
        }
    }
    for _ in 1..h {
        let mut next = Vec::with_capacity(frontier.len() * ns * na);
        for (states, actions, p) in &frontier {
            let (s, a) = (*states.last().unwrap(), *actions.last().unwrap());
            for (s2, q) in t.next_distribution(s, a).iter().enumerate() {
                for a2 in 0..na {
                    let p2 = p * q * pi[s2 * na + a2];
                    if p2 > 0.0 {
                        let mut st = states.clone();
                        st.push(s2);
                        let mut ac = actions.clone();
                        ac.push(a2);
                        next.push((st, ac, p2));
                    }
                }
            }
        }
        frontier = next;
    }
    Ok(frontier
        .into_iter()
        .map(|(st, ac, p)| {
            let seg = Segment {
                states: st.into_iter().map(State::Discrete).collect(),
                actions: ac.into_iter().map(Action::Discrete).collect(),
            };
            (seg, p)
        })
        .collect())
}

/// Exact upper objective and its gradients for pairs drawn from `π_λ`,
/// by enumeration of all horizon-`h` segment pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedUpper {
    pub value: f64,
    pub grad_phi: ParamVec,
    pub grad_lambda: ParamVec,
}

/// `G(φ, λ) = E_{τ0, τ1 ~ π_λ, y ~ labeler}[−(y·P + (1−y)(1−P))]` with both
/// partial gradients.
pub fn expected_upper(
    env: &MdpSpec,
    policy: &Policy,
    reward: &RewardModel,
    labeler: &Labeler,
    h: usize,
) -> Result<ExpectedUpper> {
    let segs = enumerate_segments(env, policy, h)?;
    let mut info = Vec::with_capacity(segs.len());
    for (seg, p) in &segs {
        let mut score = vec![0.0; policy.dim()];
        add_segment_score(policy, seg, 1.0, &mut score)?;
        let mut rgrad = vec![0.0; reward.dim()];
        add_segment_reward_grad(reward, seg, 1.0, &mut rgrad)?;
        info.push((*p, segment_reward(reward, seg)?, score, rgrad));
    }
    let mut value = 0.0;
    let mut gphi = vec![0.0; reward.dim()];
    let mut glam = vec![0.0; policy.dim()];
    for (i, (seg0, _)) in segs.iter().enumerate() {
        let (p0, r0, sc0, rg0) = &info[i];
        for (j, (seg1, _)) in segs.iter().enumerate() {
            let (p1, r1, sc1, rg1) = &info[j];
            let w = p0 * p1;
            let q = labeler.label_probability(seg0, seg1)?;
            let p = logistic(r0 - r1);
            let loss = pair_loss(q, p);
            value += w * loss;
            let c = -w * (2.0 * q - 1.0) * p * (1.0 - p);
            for k in 0..gphi.len() {
                gphi[k] += c * (rg0[k] - rg1[k]);
            }
            for k in 0..glam.len() {
                glam[k] += w * loss * (sc0[k] + sc1[k]);
            }
        }
    }
    Ok(ExpectedUpper { value, grad_phi: ParamVec::new(gphi)?, grad_lambda: ParamVec::new(glam)? })
}

/// Fraction of pairs on which `reward` and `true_reward` rank the two
/// segments the same way. Pairs the true reward ties are skipped.
pub fn bt_accuracy(reward: &RewardModel, true_reward: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    let mut agree = 0usize;
    let mut counted = 0usize;
    for pair in pairs {
        let truth = segment_reward(true_reward, &pair.seg0)? - segment_reward(true_reward, &pair.seg1)?;
        if truth == 0.0 {
            continue;
        }
        let learned = segment_reward(reward, &pair.seg0)? - segment_reward(reward, &pair.seg1)?;
        counted += 1;
        if learned * truth > 0.0 {
            agree += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("no untied pairs to score"));
    }
    Ok(agree as f64 / counted as f64)
}

/// Element type of a pair dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    Discrete,
    Continuous,
}

impl SpaceKind {
    fn tag(self) -> &'static str {
        match self {
            SpaceKind::Discrete => "discrete",
            SpaceKind::Continuous => "continuous",
        }
    }
}

const HEADER_PREFIX: &str = "# pbrl-pairs v1 space=";

fn write_segment(line: &mut String, seg: &Segment) {
    use std::fmt::Write as _;
    for (s, a) in seg.steps() {
        match (s, a) {
            (State::Discrete(s), Action::Discrete(a)) => write!(line, " {s} {a}").unwrap(),
            _ => write!(line, " {:?} {:?}", s.value(), a.value()).unwrap(),
        }
    }
}

fn pair_kind(pair: &PreferencePair) -> SpaceKind {
    match pair.seg0.states[0] {
        State::Discrete(_) => SpaceKind::Discrete,
        State::Continuous(_) => SpaceKind::Continuous,
    }
}

/// Serializes pairs, header included.
pub fn write_pairs<W: Write>(mut out: W, kind: SpaceKind, pairs: &[PreferencePair]) -> Result<()> {
    writeln!(out, "{HEADER_PREFIX}{}", kind.tag())?;
    write_records(&mut out, kind, pairs)
}

fn write_records<W: Write>(out: &mut W, kind: SpaceKind, pairs: &[PreferencePair]) -> Result<()> {
    for pair in pairs {
        if pair_kind(pair) != kind {
            return Err(Error::invalid("pair space does not match the dataset header"));
        }
        let mut line = format!("{} {}", pair.horizon(), pair.label);
        write_segment(&mut line, &pair.seg0);
        write_segment(&mut line, &pair.seg1);
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses a dataset written by [`write_pairs`].
pub fn read_pairs<R: Read>(input: R) -> Result<(SpaceKind, Vec<PreferencePair>)> {
    let mut lines = BufReader::new(input).lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, message: "empty dataset".into() })??;
    let kind = match header.trim_end().strip_prefix(HEADER_PREFIX) {
        Some("discrete") => SpaceKind::Discrete,
        Some("continuous") => SpaceKind::Continuous,
        _ => return Err(Error::Parse { line: 1, message: format!("unrecognized header `{header}`") }),
    };
    let mut pairs = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_record(&line, kind).map_err(|message| Error::Parse { line: line_no, message })?);
    }
    Ok((kind, pairs))
}

fn parse_record(line: &str, kind: SpaceKind) -> std::result::Result<PreferencePair, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err("record needs a horizon and a label".into());
    }
    let h: usize = fields[0].parse().map_err(|_| format!("bad horizon `{}`", fields[0]))?;
    let label: u8 = fields[1].parse().map_err(|_| format!("bad label `{}`", fields[1]))?;
    if h == 0 || fields.len() != 2 + 4 * h {
        return Err(format!("expected {} fields for horizon {h}, found {}", 2 + 4 * h, fields.len()));
    }
    let parse_seg = |chunk: &[&str]| -> std::result::Result<Segment, String> {
        let mut states = Vec::with_capacity(h);
        let mut actions = Vec::with_capacity(h);
        for sa in chunk.chunks(2) {
            match kind {
                SpaceKind::Discrete => {
                    states.push(State::Discrete(sa[0].parse().map_err(|_| format!("bad state `{}`", sa[0]))?));
                    actions.push(Action::Discrete(sa[1].parse().map_err(|_| format!("bad action `{}`", sa[1]))?));
                }
                SpaceKind::Continuous => {
                    let s: f64 = sa[0].parse().map_err(|_| format!("bad state `{}`", sa[0]))?;
                    let a: f64 = sa[1].parse().map_err(|_| format!("bad action `{}`", sa[1]))?;
                    if !s.is_finite() || !a.is_finite() {
                        return Err("non-finite value".into());
                    }
                    states.push(State::Continuous(s));
                    actions.push(Action::Continuous(a));
                }
            }
        }
        Ok(Segment { states, actions })
    };
    let seg0 = parse_seg(&fields[2..2 + 2 * h])?;
    let seg1 = parse_seg(&fields[2 + 2 * h..])?;
    PreferencePair::new(seg0, seg1, label).map_err(|e| e.to_string())
}

/// Appends pairs to the dataset at `path`, creating it (with header) if
/// missing or empty.
pub fn append_pairs(path: &Path, kind: SpaceKind, pairs: &[PreferencePair]) -> Result<()> {
    let existing = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
    if existing > 0 {
        let (file_kind, _) = read_pairs(std::fs::File::open(path)?)?;
        if file_kind != kind {
            return Err(Error::invalid("dataset space does not match the pairs being appended"));
        }
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if existing == 0 {
        writeln!(file, "{HEADER_PREFIX}{}", kind.tag())?;
    }
    write_records(&mut file, kind, pairs)
}
