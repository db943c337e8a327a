//! Tabular policies: planning, softening, the behavior mixture, the
//! antibiotic-constrained variants and ground-truth policy values.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{discounted_sum, flip_vasopressor, SepsisState, N_STATES};
use crate::model::{BranchedModel, Horizon, ModelError, TabularMdp};
use crate::rng::stream_rng;

/// Weight of the soft-optimal component in the behavior policy.
pub const BEHAVIOR_SOFT_WEIGHT: f64 = 0.85;
/// Default exploration rate of the soft-optimal policy.
pub const SOFTEN_EPS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy {id}: row {state} is not a distribution (sum {sum})")]
    InvalidRow { id: String, state: usize, sum: f64 },

    #[error("discount factor must lie in (0, 1) for planning, got {0}")]
    InvalidGamma(f64),

    #[error("exploration rate must lie in [0, 1], got {0}")]
    InvalidEps(f64),

    #[error("policy {id} has {got} states, expected {expected}")]
    WrongSize { id: String, got: usize, expected: usize },

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Action distribution per state, serialized as `{"id": .., "probs": [[..], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub id: String,
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(id: impl Into<String>, probs: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let p = TabularPolicy { id: id.into(), probs };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(id: impl Into<String>, n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            id: id.into(),
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(id: impl Into<String>, actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        TabularPolicy { id: id.into(), probs }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (s, row) in self.probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) || row.len() != self.n_actions() {
                return Err(PolicyError::InvalidRow { id: self.id.clone(), state: s, sum });
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = &self.probs[s];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (a, p) in row.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = a;
                if u < acc {
                    return a;
                }
            }
        }
        last
    }

    /// Expected value of `q(s, ·)` under this policy.
    pub fn expect(&self, s: usize, q: &[f64]) -> f64 {
        self.probs[s].iter().zip(q).map(|(p, x)| p * x).sum()
    }

    /// Most likely action (lowest index on ties).
    pub fn mode(&self, s: usize) -> usize {
        let row = &self.probs[s];
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunctions {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

// ── Planning ────────────────────────────────────────────────────────────

const EVAL_TOL: f64 = 1e-13;
const RESIDUAL_TOL: f64 = 1e-11;

/// Howard policy iteration on a discounted infinite-horizon model.
///
/// Evaluation runs Gauss-Seidel sweeps to `1e-13`; improvement only switches
/// an action on a strict gain so the loop cannot cycle between ties. The
/// returned values are polished with optimality sweeps until the Bellman
/// residual is below `1e-11`.
pub fn policy_iteration(mdp: &TabularMdp, gamma: f64) -> Result<(TabularPolicy, ValueFunctions), PolicyError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(PolicyError::InvalidGamma(gamma));
    }
    mdp.check_stochastic(1e-9)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let zero = vec![0.0; ns];
    let mut actions: Vec<usize> = (0..ns)
        .map(|s| argmax((0..na).map(|a| mdp.backup(s, a, gamma, &zero))))
        .collect();
    let mut v = vec![0.0; ns];

    loop {
        loop {
            let mut delta = 0.0f64;
            for s in 0..ns {
                let nv = mdp.backup(s, actions[s], gamma, &v);
                delta = delta.max((nv - v[s]).abs());
                v[s] = nv;
            }
            if delta < EVAL_TOL {
                break;
            }
        }
        let mut changed = false;
        for s in 0..ns {
            let q: Vec<f64> = (0..na).map(|a| mdp.backup(s, a, gamma, &v)).collect();
            let best = argmax(q.iter().copied());
            if q[best] > q[actions[s]] + 1e-12 {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    loop {
        let mut residual = 0.0f64;
        for s in 0..ns {
            let best = (0..na).map(|a| mdp.backup(s, a, gamma, &v)).fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if residual < RESIDUAL_TOL {
            break;
        }
    }
    let q: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..na).map(|a| mdp.backup(s, a, gamma, &v)).collect())
        .collect();
    let v = (0..ns).map(|s| q[s][actions[s]]).collect();
    Ok((TabularPolicy::deterministic("pi", &actions, na), ValueFunctions { v, q }))
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

// ── Policy transforms ───────────────────────────────────────────────────

/// `(1 − eps)·p + eps·uniform`.
pub fn soften(p: &TabularPolicy, eps: f64) -> Result<TabularPolicy, PolicyError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(PolicyError::InvalidEps(eps));
    }
    let u = eps / p.n_actions() as f64;
    let probs = p
        .probs
        .iter()
        .map(|row| row.iter().map(|x| (1.0 - eps) * x + u).collect())
        .collect();
    Ok(TabularPolicy { id: format!("{}_soft", p.id), probs })
}

/// Permutes each row by toggling the vasopressor bit of the action index.
pub fn vaso_flipped(p: &TabularPolicy) -> TabularPolicy {
    let probs = p
        .probs
        .iter()
        .map(|row| (0..row.len()).map(|a| row[flip_vasopressor(a)]).collect())
        .collect();
    TabularPolicy { id: format!("{}_vflip", p.id), probs }
}

/// 85% the soft-optimal policy, 15% its vasopressor-flipped twin.
pub fn behavior_mixture(soft_opt: &TabularPolicy) -> TabularPolicy {
    let flipped = vaso_flipped(soft_opt);
    let w = BEHAVIOR_SOFT_WEIGHT;
    let probs = soft_opt
        .probs
        .iter()
        .zip(&flipped.probs)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect())
        .collect();
    TabularPolicy { id: "behavior".into(), probs }
}

/// Where the antibiotic constraint of WA/WOA applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntibioticScope {
    /// Only at admission-like states (no treatment currently running).
    #[default]
    Admission,
    /// At every state.
    Always,
}

fn constrain_antibiotics(base: &TabularPolicy, give: bool, scope: AntibioticScope, id: &str) -> Result<TabularPolicy, PolicyError> {
    if base.n_states() != N_STATES {
        return Err(PolicyError::WrongSize {
            id: base.id.clone(),
            got: base.n_states(),
            expected: N_STATES,
        });
    }
    let probs = base
        .probs
        .iter()
        .enumerate()
        .map(|(s, row)| {
            let state = SepsisState::decode(s).expect("index below N_STATES");
            let applies = match scope {
                AntibioticScope::Admission => !state.any_treatment_on(),
                AntibioticScope::Always => true,
            };
            if !applies {
                return row.clone();
            }
            let mut out = vec![0.0; row.len()];
            for (a, p) in row.iter().enumerate() {
                let target = if give { a | 1 } else { a & !1 };
                out[target] += p;
            }
            out
        })
        .collect();
    Ok(TabularPolicy { id: id.into(), probs })
}

/// "With antibiotics": moves action mass onto antibiotic-on actions.
pub fn make_wa(base: &TabularPolicy, scope: AntibioticScope) -> Result<TabularPolicy, PolicyError> {
    constrain_antibiotics(base, true, scope, "wa")
}

/// "Without antibiotics": moves action mass onto antibiotic-off actions.
pub fn make_woa(base: &TabularPolicy, scope: AntibioticScope) -> Result<TabularPolicy, PolicyError> {
    constrain_antibiotics(base, false, scope, "woa")
}

// ── Ground truth ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueMode {
    Exact,
    MonteCarlo { n: usize, seed: u64 },
}

/// Value of `policy` from the admission distribution of `model`.
///
/// Exact mode evaluates each hidden-context branch separately and mixes by
/// branch weight. Monte Carlo mode averages discounted returns of sampled
/// episodes (finite horizon only).
pub fn true_value(policy: &TabularPolicy, model: &BranchedModel, gamma: f64, horizon: Horizon, mode: ValueMode) -> Result<f64, PolicyError> {
    match mode {
        ValueMode::Exact => Ok(model.policy_value(policy, gamma, horizon)?),
        ValueMode::MonteCarlo { n, seed } => Ok(monte_carlo_value(policy, model, gamma, horizon, n, seed)?.0),
    }
}

/// Monte Carlo mean and its standard error.
pub fn monte_carlo_value(
    policy: &TabularPolicy,
    model: &BranchedModel,
    gamma: f64,
    horizon: Horizon,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), ModelError> {
    if horizon != Horizon::Finite(model.horizon) {
        return Err(ModelError::UnboundedRollout);
    }
    let returns: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            discounted_sum(&model.sample_episode(policy, i, &mut rng), gamma)
        })
        .collect();
    Ok(mean_and_se(&returns))
}

pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Outcome;

    fn two_state_chain() -> TabularMdp {
        // s0: a0 -> terminal, reward 1; a1 -> stay in s0, reward 0. s1 absorbing.
        let rows = vec![
            vec![Outcome { next: 1, prob: 1.0, reward: 1.0, terminal: true }],
            vec![Outcome { next: 0, prob: 1.0, reward: 0.0, terminal: false }],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0, terminal: true }],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0, terminal: true }],
        ];
        TabularMdp::new(2, 2, rows).unwrap()
    }

    /// Enumerates every deterministic stationary policy of a tiny model.
    fn brute_force_best(mdp: &TabularMdp, gamma: f64, s: usize) -> f64 {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut best = f64::NEG_INFINITY;
        for code in 0..na.pow(ns as u32) {
            let acts: Vec<usize> = (0..ns).map(|k| code / na.pow(k as u32) % na).collect();
            let p = TabularPolicy::deterministic("x", &acts, na);
            let v = crate::model::solve_policy_values(mdp, &p, gamma).unwrap();
            best = best.max(v[s]);
        }
        best
    }

    #[test]
    fn two_state_chain_is_solved() {
        let m = two_state_chain();
        let (pi, vf) = policy_iteration(&m, 0.99).unwrap();
        assert_eq!(pi.mode(0), 0);
        assert!((vf.v[0] - 1.0).abs() < 1e-10);
        assert!((brute_force_best(&m, 0.99, 0) - vf.v[0]).abs() < 1e-10);
    }

    #[test]
    fn myopic_limit_is_greedy_on_reward() {
        // a0 pays 0.5 now; a1 pays 0 now but leads to a state paying 10.
        let rows = vec![
            vec![Outcome { next: 1, prob: 1.0, reward: 0.5, terminal: true }],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0, terminal: false }],
            vec![Outcome { next: 1, prob: 1.0, reward: 10.0, terminal: true }],
            vec![Outcome { next: 1, prob: 1.0, reward: 10.0, terminal: true }],
        ];
        let m = TabularMdp::new(2, 2, rows).unwrap();
        let (pi, _) = policy_iteration(&m, 1e-9).unwrap();
        assert_eq!(pi.mode(0), 0);
        let (pi, _) = policy_iteration(&m, 0.9).unwrap();
        assert_eq!(pi.mode(0), 1);
    }

    #[test]
    fn planning_rejects_bad_inputs() {
        let bad = TabularMdp::new(1, 1, vec![vec![Outcome { next: 0, prob: 0.7, reward: 0.0, terminal: true }]]).unwrap();
        assert!(matches!(policy_iteration(&bad, 0.9), Err(PolicyError::Model(ModelError::NonStochastic { .. }))));
        assert!(matches!(policy_iteration(&two_state_chain(), 1.0), Err(PolicyError::InvalidGamma(_))));
    }

    #[test]
    fn soften_from_definition() {
        let p = TabularPolicy::deterministic("p", &[3, 0], 8);
        assert_eq!(soften(&p, 0.0).unwrap().rows(), p.rows());
        let u = soften(&p, 1.0).unwrap();
        assert!(u.rows().iter().flatten().all(|x| (x - 0.125).abs() < 1e-15));
        let s = soften(&p, 0.05).unwrap();
        assert!((s.prob(0, 3) - 0.95625).abs() < 1e-15);
        assert!((s.prob(0, 0) - 0.00625).abs() < 1e-15);
        assert!(soften(&p, 1.5).is_err());
    }

    #[test]
    fn behavior_mixture_rows() {
        let uniform = TabularPolicy::uniform("u", 2, 8);
        let b = behavior_mixture(&uniform);
        assert!(b.rows().iter().flatten().all(|x| (x - 0.125).abs() < 1e-15));

        // Deterministic on antibiotics-only (index 1); flip lands on index 3.
        let soft = soften(&TabularPolicy::deterministic("d", &[1], 8), 0.05).unwrap();
        let b = behavior_mixture(&soft);
        let expected_main = 0.85 * 0.95625 + 0.15 * 0.00625;
        let expected_flip = 0.85 * 0.00625 + 0.15 * 0.95625;
        assert!((b.prob(0, 1) - expected_main).abs() < 1e-15);
        assert!((b.prob(0, 3) - expected_flip).abs() < 1e-15);
        for a in [0, 2, 4, 5, 6, 7] {
            assert!((b.prob(0, a) - 0.00625).abs() < 1e-15);
        }
        b.validate().unwrap();
    }

    #[test]
    fn wa_and_woa_constrain_admission_states() {
        let base = soften(&TabularPolicy::uniform("b", N_STATES, 8), 0.0).unwrap();
        let wa = make_wa(&base, AntibioticScope::Admission).unwrap();
        let woa = make_woa(&base, AntibioticScope::Admission).unwrap();
        let admission = SepsisState::healthy().encode();
        for a in 0..8 {
            if a & 1 == 0 {
                assert_eq!(wa.prob(admission, a), 0.0);
            } else {
                assert_eq!(woa.prob(admission, a), 0.0);
            }
        }
        let treated = SepsisState { abx_on: true, ..SepsisState::healthy() }.encode();
        assert_eq!(wa.row(treated), base.row(treated));
        assert_eq!(woa.row(treated), base.row(treated));
        let always = make_wa(&base, AntibioticScope::Always).unwrap();
        assert_eq!(always.prob(treated, 0), 0.0);
        wa.validate().unwrap();
        woa.validate().unwrap();
        assert!(make_wa(&TabularPolicy::uniform("small", 3, 8), AntibioticScope::Admission).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_policy() -> impl Strategy<Value = TabularPolicy> {
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..5).prop_filter_map("zero row", |rows| {
                let probs: Option<Vec<Vec<f64>>> = rows
                    .into_iter()
                    .map(|r| {
                        let z: f64 = r.iter().sum();
                        (z > 1e-6).then(|| r.iter().map(|x| x / z).collect())
                    })
                    .collect();
                probs.map(|p| TabularPolicy { id: "p".into(), probs: p })
            })
        }

        proptest! {
            #[test]
            fn soften_stays_in_simplex(p in arb_policy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let twice = soften(&soften(&p, a).unwrap(), b).unwrap();
                prop_assert!(twice.validate().is_ok());
            }

            #[test]
            fn vaso_flip_is_an_involution(p in arb_policy()) {
                let twice = vaso_flipped(&vaso_flipped(&p));
                prop_assert_eq!(twice.rows(), p.rows());
                prop_assert!(behavior_mixture(&p).validate().is_ok());
            }
        }
    }
}
