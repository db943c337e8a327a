//! Off-policy estimators over logged trajectories.
//!
//! Every estimator takes a slice of trajectories so the same code serves a
//! whole dataset, a subgroup of it, or a bootstrap resample.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{discount_powers, Trajectory};
use crate::policy::{TabularPolicy, ValueFunctions};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("behavior policy gives zero probability to the logged action (participant {participant}, step {step})")]
    Coverage { participant: u64, step: usize },

    #[error("{0}: every importance weight is zero")]
    DegenerateWeights(&'static str),

    #[error("{0}: no trajectories")]
    Empty(&'static str),

    #[error("effective sample size undefined for an all-zero input")]
    AllZero,

    #[error("discount factor must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("state {state} or action {action} outside the policy table (participant {participant})")]
    Shape { participant: u64, state: usize, action: usize },

    #[error("resample {rep}: {source}")]
    Resample {
        rep: usize,
        #[source]
        source: Box<OpeError>,
    },

    #[error("invalid estimator config: {0}")]
    Config(String),
}

fn check_gamma(gamma: f64) -> Result<(), OpeError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(OpeError::InvalidGamma(gamma))
    }
}

fn nonempty(trajs: &[Trajectory], who: &'static str) -> Result<(), OpeError> {
    if trajs.is_empty() {
        Err(OpeError::Empty(who))
    } else {
        Ok(())
    }
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator_id: String,
    pub value: f64,
    /// Effective sample size over the importance weights.
    pub ess: f64,
    /// `(Σ g)² / Σ g²` over the returns, when defined.
    pub ess_returns: Option<f64>,
    /// `‖g‖²∞ (1/ESS − 1/N)` with the weight-based ESS.
    pub variance_bound: Option<f64>,
    /// The same bound with the return-based ESS.
    pub variance_bound_returns: Option<f64>,
    pub n_used: usize,
}

impl EstimateReport {
    fn plain(id: &str, value: f64, ess: f64, n: usize) -> Self {
        EstimateReport {
            estimator_id: id.into(),
            value,
            ess,
            ess_returns: None,
            variance_bound: None,
            variance_bound_returns: None,
            n_used: n,
        }
    }

    pub const CSV_HEADER: &'static str = "estimator,policy,subgroup,value,ess,var_bound,n";

    pub fn csv_row(&self, policy: &str, subgroup: Option<usize>) -> String {
        let sub = subgroup.map_or_else(String::new, |m| m.to_string());
        let bound = self.variance_bound.map_or_else(String::new, |b| b.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.estimator_id, policy, sub, self.value, self.ess, bound, self.n_used
        )
    }
}

// ── Importance weights ──────────────────────────────────────────────────

/// Running products of `π(a_t|s_t) / β(a_t|s_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsWeights {
    pub per_step: Vec<f64>,
}

impl IsWeights {
    /// The full-trajectory weight `ω_i`.
    pub fn total(&self) -> f64 {
        *self.per_step.last().expect("trajectories are nonempty")
    }
}

pub fn is_weights(traj: &Trajectory, pi: &TabularPolicy, beta: &TabularPolicy) -> Result<IsWeights, OpeError> {
    let mut w = 1.0;
    let mut per_step = Vec::with_capacity(traj.len());
    for (t, step) in traj.steps.iter().enumerate() {
        if step.state >= pi.n_states() || step.state >= beta.n_states() || step.action >= pi.n_actions() || step.action >= beta.n_actions() {
            return Err(OpeError::Shape { participant: traj.participant_id, state: step.state, action: step.action });
        }
        let b = beta.prob(step.state, step.action);
        if b <= 0.0 {
            return Err(OpeError::Coverage { participant: traj.participant_id, step: t });
        }
        w *= pi.prob(step.state, step.action) / b;
        per_step.push(w);
    }
    Ok(IsWeights { per_step })
}

/// Per-step discounted rewards `γ^t r_t`.
fn discounted_rewards(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    discount_powers(gamma, traj.len())
        .into_iter()
        .zip(&traj.steps)
        .map(|(d, s)| d * s.reward)
        .collect()
}

fn total_return(terms: &[f64]) -> f64 {
    terms.iter().sum()
}

struct Weighted {
    weights: Vec<IsWeights>,
    terms: Vec<Vec<f64>>,
}

fn weigh(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<Weighted, OpeError> {
    check_gamma(gamma)?;
    let weights = trajs.iter().map(|t| is_weights(t, pi, beta)).collect::<Result<Vec<_>, _>>()?;
    let terms = trajs.iter().map(|t| discounted_rewards(t, gamma)).collect();
    Ok(Weighted { weights, terms })
}

// ── Effective sample size and the variance bound ────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EssMode {
    /// Over importance weights.
    #[default]
    Weights,
    /// Over returns.
    Returns,
}

/// `(Σ x)² / Σ x²`.
pub fn ess(values: &[f64]) -> Result<f64, OpeError> {
    let sq: f64 = values.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return Err(OpeError::AllZero);
    }
    let s: f64 = values.iter().sum();
    Ok(s * s / sq)
}

/// `‖g‖²∞ (1/ESS − 1/N)`, clamped at zero.
///
/// With every return zero the bound is zero. With every weight zero (and
/// some return nonzero) the weight-based ESS is zero and the bound is
/// infinite: the subgroup carries no information about the target policy.
fn bound_from(g: &[f64], ess_value: Option<f64>) -> f64 {
    let n = g.len() as f64;
    let g_inf = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if g_inf == 0.0 {
        return 0.0;
    }
    match ess_value {
        Some(e) if e > 0.0 => (g_inf * g_inf * (1.0 / e - 1.0 / n)).max(0.0),
        _ => f64::INFINITY,
    }
}

pub fn variance_upper_bound(
    trajs: &[Trajectory],
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    gamma: f64,
    mode: EssMode,
) -> Result<f64, OpeError> {
    nonempty(trajs, "variance bound")?;
    let w = weigh(trajs, pi, beta, gamma)?;
    let g: Vec<f64> = w.terms.iter().map(|t| total_return(t)).collect();
    let e = match mode {
        EssMode::Weights => {
            let omega: Vec<f64> = w.weights.iter().map(IsWeights::total).collect();
            ess(&omega)?
        }
        EssMode::Returns => ess(&g)?,
    };
    Ok(bound_from(&g, Some(e)))
}

// ── Importance sampling family ──────────────────────────────────────────

/// Difference estimator `(1/N) Σ (ω_i g_i − g_i)` of `V^π − V^β`.
pub fn d_hat(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<EstimateReport, OpeError> {
    nonempty(trajs, "d_hat")?;
    let w = weigh(trajs, pi, beta, gamma)?;
    let n = trajs.len();
    let omega: Vec<f64> = w.weights.iter().map(IsWeights::total).collect();
    let g: Vec<f64> = w.terms.iter().map(|t| total_return(t)).collect();
    let sum: f64 = omega.iter().zip(&g).map(|(o, gi)| o * gi - gi).sum();
    let ess_w = ess(&omega).ok();
    let ess_g = ess(&g).ok();
    Ok(EstimateReport {
        estimator_id: "d_hat".into(),
        value: sum / n as f64,
        ess: ess_w.unwrap_or(0.0),
        ess_returns: ess_g,
        variance_bound: Some(bound_from(&g, ess_w)),
        variance_bound_returns: ess_g.map(|e| bound_from(&g, Some(e))),
        n_used: n,
    })
}

/// On-policy mean of discounted returns.
pub fn mean_return(trajs: &[Trajectory], gamma: f64) -> Result<f64, OpeError> {
    nonempty(trajs, "mean return")?;
    check_gamma(gamma)?;
    let s: f64 = trajs.iter().map(|t| total_return(&discounted_rewards(t, gamma))).sum();
    Ok(s / trajs.len() as f64)
}

/// Ordinary full-trajectory importance sampling.
pub fn is_estimate(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<EstimateReport, OpeError> {
    nonempty(trajs, "is")?;
    let w = weigh(trajs, pi, beta, gamma)?;
    let omega: Vec<f64> = w.weights.iter().map(IsWeights::total).collect();
    let sum: f64 = omega.iter().zip(&w.terms).map(|(o, t)| o * total_return(t)).sum();
    Ok(EstimateReport::plain("is", sum / trajs.len() as f64, ess(&omega).unwrap_or(0.0), trajs.len()))
}

pub fn wis_estimate(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<EstimateReport, OpeError> {
    nonempty(trajs, "wis")?;
    let w = weigh(trajs, pi, beta, gamma)?;
    let omega: Vec<f64> = w.weights.iter().map(IsWeights::total).collect();
    let denom: f64 = omega.iter().sum();
    if denom == 0.0 {
        return Err(OpeError::DegenerateWeights("wis"));
    }
    let num: f64 = omega.iter().zip(&w.terms).map(|(o, t)| o * total_return(t)).sum();
    Ok(EstimateReport::plain("wis", num / denom, ess(&omega)?, trajs.len()))
}

/// Per-decision importance sampling. Each reward is weighted by the
/// product of ratios up to its own step.
pub fn pdis_estimate(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<EstimateReport, OpeError> {
    nonempty(trajs, "pdis")?;
    let w = weigh(trajs, pi, beta, gamma)?;
    let sum: f64 = w
        .weights
        .iter()
        .zip(&w.terms)
        .map(|(iw, terms)| iw.per_step.iter().zip(terms).map(|(o, r)| o * r).sum::<f64>())
        .sum();
    let omega: Vec<f64> = w.weights.iter().map(IsWeights::total).collect();
    Ok(EstimateReport::plain("pdis", sum / trajs.len() as f64, ess(&omega).unwrap_or(0.0), trajs.len()))
}

// ── Fitted Q evaluation ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqeConfig {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        FqeConfig { max_sweeps: 10_000, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqeResult {
    pub values: ValueFunctions,
    /// `(s, a)` pairs never observed in the data; their Q stays 0.
    pub unvisited: usize,
    pub sweeps: usize,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
}

impl FqeResult {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.values.q[s][a]
    }

    pub fn v(&self, s: usize) -> f64 {
        self.values.v[s]
    }
}

/// Aggregated transitions out of one `(s, a)` pair.
#[derive(Default)]
struct Cell {
    count: f64,
    reward: f64,
    /// Continuation state → number of transitions.
    next: HashMap<usize, f64>,
}

/// Tabular fitted Q evaluation.
///
/// A transition is treated as final (no bootstrap) when it ends the
/// trajectory, whether by a terminal event or by reaching the horizon.
pub fn fqe(trajs: &[Trajectory], pi: &TabularPolicy, gamma: f64, config: FqeConfig) -> Result<FqeResult, OpeError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(OpeError::InvalidGamma(gamma));
    }
    let (ns, na) = (pi.n_states(), pi.n_actions());
    let mut cells: Vec<Cell> = (0..ns * na).map(|_| Cell::default()).collect();
    for t in trajs {
        for (i, step) in t.steps.iter().enumerate() {
            if step.state >= ns || step.action >= na {
                return Err(OpeError::Shape { participant: t.participant_id, state: step.state, action: step.action });
            }
            let c = &mut cells[step.state * na + step.action];
            c.count += 1.0;
            c.reward += step.reward;
            if i + 1 < t.len() {
                *c.next.entry(t.steps[i + 1].state).or_default() += 1.0;
            }
        }
    }
    // Sorted continuation lists keep the floating-point sums order-stable.
    let table: Vec<Option<(f64, Vec<(usize, f64)>)>> = cells
        .into_iter()
        .map(|c| {
            if c.count == 0.0 {
                return None;
            }
            let mut next: Vec<(usize, f64)> = c.next.into_iter().map(|(s, k)| (s, k / c.count)).collect();
            next.sort_by_key(|x| x.0);
            Some((c.reward / c.count, next))
        })
        .collect();
    let unvisited = table.iter().filter(|c| c.is_none()).count();

    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut change = 0.0f64;
        let new_q: Vec<f64> = table
            .iter()
            .map(|c| match c {
                None => 0.0,
                Some((r, next)) => r + gamma * next.iter().map(|(s, p)| p * v[*s]).sum::<f64>(),
            })
            .collect();
        for (old, new) in q.iter().zip(&new_q) {
            change = change.max((old - new).abs());
        }
        q = new_q;
        v = (0..ns).map(|s| pi.expect(s, &q[s * na..(s + 1) * na])).collect();
        residual = change;
        if change <= config.tol {
            break;
        }
    }
    let q_rows = q.chunks(na).map(<[f64]>::to_vec).collect();
    Ok(FqeResult { values: ValueFunctions { v, q: q_rows }, unvisited, sweeps, residual })
}

/// Mean of `V̂(s_0)` over the trajectories' initial states.
pub fn fqe_estimate(trajs: &[Trajectory], fit: &FqeResult) -> Result<EstimateReport, OpeError> {
    nonempty(trajs, "fqe")?;
    let s: f64 = trajs.iter().map(|t| fit.v(t.initial_state())).sum();
    Ok(EstimateReport::plain("fqe", s / trajs.len() as f64, trajs.len() as f64, trajs.len()))
}

// ── Doubly robust family ────────────────────────────────────────────────

/// Self-normalized per-step weights `w_t^i = ρ_{0:t}^i / Σ_j ρ_{0:t}^j`,
/// with finished trajectories padded by unit ratios.
struct StepTable {
    horizon: usize,
    /// `w[t][i]`; `w_{-1}` is the uniform `1/N`.
    w: Vec<Vec<f64>>,
    disc: Vec<f64>,
    terms: Vec<Vec<f64>>,
}

impl StepTable {
    fn new(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64, who: &'static str) -> Result<Self, OpeError> {
        nonempty(trajs, who)?;
        let weighted = weigh(trajs, pi, beta, gamma)?;
        let horizon = trajs.iter().map(Trajectory::len).max().unwrap_or(0);
        let mut w = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let raw: Vec<f64> = weighted
                .weights
                .iter()
                .map(|iw| iw.per_step[t.min(iw.per_step.len() - 1)])
                .collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                return Err(OpeError::DegenerateWeights(who));
            }
            w.push(raw.into_iter().map(|x| x / total).collect());
        }
        Ok(StepTable { horizon, w, disc: discount_powers(gamma, horizon), terms: weighted.terms })
    }

    fn prev(&self, t: usize, i: usize, n: usize) -> f64 {
        if t == 0 {
            1.0 / n as f64
        } else {
            self.w[t - 1][i]
        }
    }
}

/// Control-variate inputs for the doubly robust estimators.
pub trait ValueModel {
    fn q(&self, s: usize, a: usize) -> f64;
    fn v(&self, s: usize) -> f64;
}

impl ValueModel for FqeResult {
    fn q(&self, s: usize, a: usize) -> f64 {
        self.values.q[s][a]
    }
    fn v(&self, s: usize) -> f64 {
        self.values.v[s]
    }
}

/// The all-zero model.
pub struct ZeroModel;

impl ValueModel for ZeroModel {
    fn q(&self, _: usize, _: usize) -> f64 {
        0.0
    }
    fn v(&self, _: usize) -> f64 {
        0.0
    }
}

/// Per-step sums over trajectories:
/// `reward[t] = Σ_i w_t γ^t r_t`,
/// `control[t] = Σ_i γ^t (w_t q̂(s_t,a_t) − w_{t−1} v̂(s_t))`,
/// `lookahead[t] = Σ_i γ^t w_{t−1} v̂(s_t)`.
/// Positions past a trajectory's end are absorbing and contribute zero.
struct DrTerms {
    reward: Vec<f64>,
    control: Vec<f64>,
    lookahead: Vec<f64>,
}

fn dr_terms(trajs: &[Trajectory], table: &StepTable, model: &dyn ValueModel) -> DrTerms {
    let n = trajs.len();
    let mut out = DrTerms {
        reward: vec![0.0; table.horizon],
        control: vec![0.0; table.horizon],
        lookahead: vec![0.0; table.horizon],
    };
    for t in 0..table.horizon {
        let d = table.disc[t];
        let (mut r_sum, mut c_sum, mut l_sum) = (0.0, 0.0, 0.0);
        for (i, traj) in trajs.iter().enumerate() {
            let Some(step) = traj.steps.get(t) else { continue };
            let wt = table.w[t][i];
            let wp = table.prev(t, i, n);
            let v = model.v(step.state);
            r_sum += wt * table.terms[i][t];
            c_sum += d * (wt * model.q(step.state, step.action) - wp * v);
            l_sum += d * wp * v;
        }
        out.reward[t] = r_sum;
        out.control[t] = c_sum;
        out.lookahead[t] = l_sum;
    }
    out
}

impl DrTerms {
    fn wdr(&self) -> f64 {
        self.reward.iter().zip(&self.control).map(|(r, c)| r - c).sum()
    }

    /// Importance-weighted for the first `j` steps, model-based after.
    fn partial(&self, j: usize) -> f64 {
        let head: f64 = self.reward[..j.min(self.reward.len())]
            .iter()
            .zip(&self.control)
            .map(|(r, c)| r - c)
            .sum();
        head + self.lookahead.get(j).copied().unwrap_or(0.0)
    }
}

/// Self-normalized per-decision importance sampling.
pub fn weighted_pdis_estimate(trajs: &[Trajectory], pi: &TabularPolicy, beta: &TabularPolicy, gamma: f64) -> Result<EstimateReport, OpeError> {
    let table = StepTable::new(trajs, pi, beta, gamma, "weighted pdis")?;
    let n = trajs.len();
    let mut value = 0.0;
    for t in 0..table.horizon {
        let mut r_sum = 0.0;
        for (i, traj) in trajs.iter().enumerate() {
            if t < traj.len() {
                r_sum += table.w[t][i] * table.terms[i][t];
            }
        }
        value += r_sum;
    }
    Ok(EstimateReport::plain("wpdis", value, final_ess(&table, n), n))
}

fn final_ess(table: &StepTable, n: usize) -> f64 {
    table.w.last().and_then(|w| ess(w).ok()).unwrap_or(0.0).min(n as f64)
}

/// Weighted doubly robust estimate with `model` as control variate.
pub fn wdr_estimate(
    trajs: &[Trajectory],
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    gamma: f64,
    model: &dyn ValueModel,
) -> Result<EstimateReport, OpeError> {
    let table = StepTable::new(trajs, pi, beta, gamma, "wdr")?;
    let terms = dr_terms(trajs, &table, model);
    Ok(EstimateReport::plain("wdr", terms.wdr(), final_ess(&table, trajs.len()), trajs.len()))
}

// ── MAGIC ───────────────────────────────────────────────────────────────

/// Switch point of a partial-horizon estimate: `Step(j)` uses importance
/// weighting for the first `j` steps, `Full` is the complete WDR estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    Step(usize),
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagicConfig {
    /// `None` means every step `0..=T` plus `Full`.
    pub switches: Option<Vec<Switch>>,
    pub bootstrap: usize,
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub seed: u64,
}

impl Default for MagicConfig {
    fn default() -> Self {
        MagicConfig { switches: None, bootstrap: 200, lower_pct: 10.0, upper_pct: 90.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagicReport {
    pub report: EstimateReport,
    pub switches: Vec<Switch>,
    pub partials: Vec<f64>,
    pub blend: Vec<f64>,
}

fn partials_for(terms: &DrTerms, switches: &[Switch]) -> Vec<f64> {
    switches
        .iter()
        .map(|s| match s {
            Switch::Step(j) => terms.partial(*j),
            Switch::Full => terms.wdr(),
        })
        .collect()
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Blends partial-horizon estimates with simplex weights minimizing the
/// bootstrap mean squared error proxy `xᵀ(Ω + b bᵀ)x`.
pub fn magic_estimate(
    trajs: &[Trajectory],
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    gamma: f64,
    model: &(dyn ValueModel + Sync),
    config: &MagicConfig,
) -> Result<MagicReport, OpeError> {
    if config.bootstrap < 2 {
        return Err(OpeError::Config("MAGIC needs at least 2 bootstrap resamples".into()));
    }
    if !(0.0..=100.0).contains(&config.lower_pct) || !(config.lower_pct..=100.0).contains(&config.upper_pct) {
        return Err(OpeError::Config("percentiles must satisfy 0 ≤ lower ≤ upper ≤ 100".into()));
    }
    let table = StepTable::new(trajs, pi, beta, gamma, "magic")?;
    let switches = config.switches.clone().unwrap_or_else(|| {
        (0..=table.horizon).map(Switch::Step).chain(std::iter::once(Switch::Full)).collect()
    });
    if switches.is_empty() {
        return Err(OpeError::Config("empty switch set".into()));
    }
    let terms = dr_terms(trajs, &table, model);
    let partials = partials_for(&terms, &switches);
    let n = trajs.len();

    let blend = if switches.len() == 1 {
        vec![1.0]
    } else {
        // Each bootstrap row: partial estimates followed by the full WDR.
        let rows: Vec<(Vec<f64>, f64)> = (0..config.bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream_rng(config.seed, b as u64);
                let sample: Vec<Trajectory> = (0..n).map(|_| trajs[rng.random_range(0..n)].clone()).collect();
                let t = StepTable::new(&sample, pi, beta, gamma, "magic")?;
                let d = dr_terms(&sample, &t, model);
                Ok((partials_for(&d, &switches), d.wdr()))
            })
            .collect::<Result<_, OpeError>>()?;
        let k = switches.len();
        let nb = rows.len() as f64;
        let means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r.0[j]).sum::<f64>() / nb).collect();
        let mut omega = vec![vec![0.0; k]; k];
        for (x, _) in &rows {
            for a in 0..k {
                for b in 0..k {
                    omega[a][b] += (x[a] - means[a]) * (x[b] - means[b]) / (nb - 1.0);
                }
            }
        }
        let mut full: Vec<f64> = rows.iter().map(|r| r.1).collect();
        full.sort_by(f64::total_cmp);
        let lo = percentile(&full, config.lower_pct);
        let hi = percentile(&full, config.upper_pct);
        let bias: Vec<f64> = partials.iter().map(|g| if *g < lo { lo - g } else if *g > hi { g - hi } else { 0.0 }).collect();
        for a in 0..k {
            for b in 0..k {
                omega[a][b] += bias[a] * bias[b];
            }
        }
        simplex_quadratic_min(&omega)
    };
    let value = partials.iter().zip(&blend).map(|(g, x)| g * x).sum();
    Ok(MagicReport {
        report: EstimateReport::plain("magic", value, final_ess(&table, n), n),
        switches,
        partials,
        blend,
    })
}

/// Minimizes `xᵀ A x` over the probability simplex by trying every support
/// set and solving its equality-constrained system. Dimension is small
/// (horizon + 2), so enumeration is exact and cheap.
fn simplex_quadratic_min(a: &[Vec<f64>]) -> Vec<f64> {
    let k = a.len();
    let scale = (0..k).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    let ridge = scale * 1e-10;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1u32 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let m = idx.len();
        let sub = nalgebra::DMatrix::from_fn(m, m, |r, c| a[idx[r]][idx[c]] + if r == c { ridge } else { 0.0 });
        let Some(sol) = sub.lu().solve(&nalgebra::DVector::from_element(m, 1.0)) else { continue };
        let total: f64 = sol.iter().sum();
        if !(total.is_finite() && total > 0.0) || sol.iter().any(|x| *x < 0.0) {
            continue;
        }
        let mut x = vec![0.0; k];
        for (pos, &i) in idx.iter().enumerate() {
            x[i] = sol[pos] / total;
        }
        let obj: f64 = (0..k).map(|r| (0..k).map(|c| x[r] * a[r][c] * x[c]).sum::<f64>()).sum();
        if best.as_ref().is_none_or(|b| obj < b.0 - 1e-15 * scale) {
            best = Some((obj, x));
        }
    }
    best.map(|b| b.1).unwrap_or_else(|| {
        let mut x = vec![0.0; k];
        x[k - 1] = 1.0;
        x
    })
}

// ── Resampling ──────────────────────────────────────────────────────────

pub const RRS_REPS: usize = 20;

/// Bootstrap index sets: `reps` draws of `size` indices from `0..pool`.
pub fn resample_indices(pool: usize, size: usize, reps: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..reps)
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            (0..size).map(|_| rng.random_range(0..pool)).collect()
        })
        .collect()
}

/// Mean of `estimator` over the given resamples of `pool`.
pub fn rrs_with_resamples<F>(pool: &[Trajectory], resamples: &[Vec<usize>], estimator: F) -> Result<EstimateReport, OpeError>
where
    F: Fn(&[Trajectory]) -> Result<EstimateReport, OpeError> + Sync,
{
    if resamples.is_empty() {
        return Err(OpeError::Config("at least one resample required".into()));
    }
    let reports = resamples
        .par_iter()
        .enumerate()
        .map(|(rep, idx)| {
            let sample: Vec<Trajectory> = idx.iter().map(|&i| pool[i].clone()).collect();
            estimator(&sample).map_err(|e| OpeError::Resample { rep, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let k = reports.len() as f64;
    let first = &reports[0];
    Ok(EstimateReport {
        estimator_id: format!("rrs_{}", first.estimator_id),
        value: reports.iter().map(|r| r.value).sum::<f64>() / k,
        ess: reports.iter().map(|r| r.ess).sum::<f64>() / k,
        ess_returns: None,
        variance_bound: None,
        variance_bound_returns: None,
        n_used: first.n_used,
    })
}

/// Repeated random sampling: `reps` bootstrap resamples of size `|pool|`.
pub fn rrs<F>(pool: &[Trajectory], reps: usize, seed: u64, estimator: F) -> Result<EstimateReport, OpeError>
where
    F: Fn(&[Trajectory]) -> Result<EstimateReport, OpeError> + Sync,
{
    nonempty(pool, "rrs")?;
    rrs_with_resamples(pool, &resample_indices(pool.len(), pool.len(), reps, seed), estimator)
}

/// Resamples `size` trajectories from a pool that mixes real and
/// synthetic trajectories.
pub fn rrs_sized<F>(pool: &[Trajectory], size: usize, reps: usize, seed: u64, estimator: F) -> Result<EstimateReport, OpeError>
where
    F: Fn(&[Trajectory]) -> Result<EstimateReport, OpeError> + Sync,
{
    nonempty(pool, "rrs")?;
    if size == 0 {
        return Err(OpeError::Config("resample size must be positive".into()));
    }
    rrs_with_resamples(pool, &resample_indices(pool.len(), size, reps, seed), estimator)
}
