//! Tabular episodic models: sparse transition tables with per-outcome
//! rewards and terminal flags, optionally split into hidden-context branches
//! (each with its own dynamics and admission distribution).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Step, Trajectory};
use crate::policy::TabularPolicy;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("row ({state}, {action}) sums to {sum}, not 1")]
    NonStochastic { state: usize, action: usize, sum: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("policy evaluation system is singular (gamma = {0}); use a finite horizon")]
    Singular(f64),

    #[error("monte carlo evaluation needs a finite horizon")]
    UnboundedRollout,
}

/// One possible result of taking an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Vec<Outcome>>,
}

impl TabularMdp {
    /// `rows` is indexed by `state * n_actions + action`.
    pub fn new(n_states: usize, n_actions: usize, rows: Vec<Vec<Outcome>>) -> Result<Self, ModelError> {
        if rows.len() != n_states * n_actions {
            return Err(ModelError::Dimension(format!(
                "{} rows for {n_states} states x {n_actions} actions",
                rows.len()
            )));
        }
        if let Some(bad) = rows.iter().flatten().find(|o| o.next >= n_states) {
            return Err(ModelError::Dimension(format!("next state {} out of range", bad.next)));
        }
        Ok(TabularMdp { n_states, n_actions, rows })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.rows[s * self.n_actions + a]
    }

    /// Largest deviation of any row's total probability from 1.
    pub fn max_row_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.iter().map(|o| o.prob).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<(), ModelError> {
        for (i, row) in self.rows.iter().enumerate() {
            let sum: f64 = row.iter().map(|o| o.prob).sum();
            if (sum - 1.0).abs() > tol || row.iter().any(|o| o.prob < 0.0) {
                return Err(ModelError::NonStochastic {
                    state: i / self.n_actions,
                    action: i % self.n_actions,
                    sum,
                });
            }
        }
        Ok(())
    }

    /// One-step lookahead `Σ p·(r + γ·[¬terminal]·v(s'))`.
    pub fn backup(&self, s: usize, a: usize, gamma: f64, v: &[f64]) -> f64 {
        self.outcomes(s, a)
            .iter()
            .map(|o| o.prob * (o.reward + if o.terminal { 0.0 } else { gamma * v[o.next] }))
            .sum()
    }

    /// Convex combination of transition tables, merging identical outcomes.
    pub fn mixture(parts: &[(f64, &TabularMdp)]) -> Result<TabularMdp, ModelError> {
        let first = parts
            .first()
            .ok_or_else(|| ModelError::Dimension("empty mixture".into()))?
            .1;
        let (ns, na) = (first.n_states, first.n_actions);
        if parts.iter().any(|(_, m)| m.n_states != ns || m.n_actions != na) {
            return Err(ModelError::Dimension("mixture of differently sized models".into()));
        }
        let rows = (0..ns * na)
            .map(|i| {
                let mut merged: Vec<Outcome> = Vec::new();
                for (w, m) in parts {
                    for o in &m.rows[i] {
                        match merged
                            .iter_mut()
                            .find(|x| x.next == o.next && x.terminal == o.terminal && x.reward == o.reward)
                        {
                            Some(x) => x.prob += w * o.prob,
                            None => merged.push(Outcome { prob: w * o.prob, ..*o }),
                        }
                    }
                }
                merged.retain(|o| o.prob > 0.0);
                merged
            })
            .collect();
        Ok(TabularMdp { n_states: ns, n_actions: na, rows })
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Outcome {
        let row = self.outcomes(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in row {
            acc += o.prob;
            if u < acc {
                return *o;
            }
        }
        *row.last().expect("empty transition row")
    }
}

/// A hidden per-episode context: drawn once with probability `weight`, it
/// fixes both the admission distribution and the dynamics for the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub weight: f64,
    pub initial: Vec<f64>,
    pub mdp: TabularMdp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchedModel {
    pub branches: Vec<Branch>,
    pub horizon: usize,
}

impl BranchedModel {
    pub fn single(mdp: TabularMdp, initial: Vec<f64>, horizon: usize) -> Self {
        BranchedModel {
            branches: vec![Branch { weight: 1.0, initial, mdp }],
            horizon,
        }
    }

    pub fn n_states(&self) -> usize {
        self.branches[0].mdp.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.branches[0].mdp.n_actions()
    }

    /// Dynamics averaged over the hidden context with the population weights.
    pub fn marginal_mdp(&self) -> Result<TabularMdp, ModelError> {
        let parts: Vec<(f64, &TabularMdp)> = self.branches.iter().map(|b| (b.weight, &b.mdp)).collect();
        TabularMdp::mixture(&parts)
    }

    /// Marginal admission distribution.
    pub fn initial_distribution(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states()];
        for b in &self.branches {
            for (o, p) in out.iter_mut().zip(&b.initial) {
                *o += b.weight * p;
            }
        }
        out
    }

    /// Posterior over branches for an episode admitted in `s0`. Falls back to
    /// the prior weights for states no branch can admit.
    pub fn branch_posterior(&self, s0: usize) -> Vec<f64> {
        let joint: Vec<f64> = self.branches.iter().map(|b| b.weight * b.initial[s0]).collect();
        let z: f64 = joint.iter().sum();
        if z > 0.0 {
            joint.iter().map(|j| j / z).collect()
        } else {
            self.branches.iter().map(|b| b.weight).collect()
        }
    }

    /// State values per branch for the given horizon.
    pub fn branch_values(&self, policy: &TabularPolicy, gamma: f64, horizon: Horizon) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_policy(policy)?;
        self.branches
            .iter()
            .map(|b| match horizon {
                Horizon::Finite(t) => Ok(finite_horizon_q(&b.mdp, policy, gamma, t).0),
                Horizon::Infinite => solve_policy_values(&b.mdp, policy, gamma),
            })
            .collect()
    }

    /// `V(π | s0)` for every state, mixing branches by their posterior given `s0`.
    pub fn value_by_initial_state(&self, policy: &TabularPolicy, gamma: f64, horizon: Horizon) -> Result<Vec<f64>, ModelError> {
        let per_branch = self.branch_values(policy, gamma, horizon)?;
        Ok((0..self.n_states())
            .map(|s| {
                self.branch_posterior(s)
                    .iter()
                    .zip(&per_branch)
                    .map(|(w, v)| w * v[s])
                    .sum()
            })
            .collect())
    }

    /// Expected value from the admission distribution.
    pub fn policy_value(&self, policy: &TabularPolicy, gamma: f64, horizon: Horizon) -> Result<f64, ModelError> {
        let per_branch = self.branch_values(policy, gamma, horizon)?;
        Ok(self
            .branches
            .iter()
            .zip(&per_branch)
            .map(|(b, v)| b.weight * b.initial.iter().zip(v).map(|(p, x)| p * x).sum::<f64>())
            .sum())
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<(), ModelError> {
        if policy.n_states() != self.n_states() || policy.n_actions() != self.n_actions() {
            return Err(ModelError::Dimension(format!(
                "policy {} is {}x{}, model is {}x{}",
                policy.id,
                policy.n_states(),
                policy.n_actions(),
                self.n_states(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// Samples one episode by drawing the hidden branch, the admission state
    /// and then transitions until a terminal outcome or the horizon.
    pub fn sample_episode<R: Rng + ?Sized>(&self, policy: &TabularPolicy, participant_id: u64, rng: &mut R) -> Trajectory {
        let weights: Vec<f64> = self.branches.iter().map(|b| b.weight).collect();
        let branch = &self.branches[sample_index(&weights, rng)];
        let mut s = sample_index(&branch.initial, rng);
        let mut steps = Vec::with_capacity(self.horizon);
        let mut early = false;
        for _ in 0..self.horizon {
            let a = policy.sample(s, rng);
            let o = branch.mdp.sample(s, a, rng);
            steps.push(Step { state: s, action: a, reward: o.reward });
            s = o.next;
            if o.terminal {
                early = true;
                break;
            }
        }
        Trajectory {
            participant_id,
            steps,
            terminal_state: s,
            terminated_early: early,
            synthetic: false,
        }
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `(V_T, Q_T)` for a policy with `horizon` decisions remaining.
pub fn finite_horizon_q(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64, horizon: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; ns];
    let mut q = vec![vec![0.0; na]; ns];
    for _ in 0..horizon {
        for (s, qs) in q.iter_mut().enumerate() {
            for (a, x) in qs.iter_mut().enumerate() {
                *x = mdp.backup(s, a, gamma, &v);
            }
        }
        v = q
            .iter()
            .enumerate()
            .map(|(s, qs)| qs.iter().enumerate().map(|(a, x)| policy.prob(s, a) * x).sum())
            .collect();
    }
    (v, q)
}

/// Solves `(I − γ P_π) V = R_π` for the infinite-horizon discounted value.
pub fn solve_policy_values(mdp: &TabularMdp, policy: &TabularPolicy, gamma: f64) -> Result<Vec<f64>, ModelError> {
    let n = mdp.n_states();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        for act in 0..mdp.n_actions() {
            let p_a = policy.prob(s, act);
            if p_a == 0.0 {
                continue;
            }
            for o in mdp.outcomes(s, act) {
                b[s] += p_a * o.prob * o.reward;
                if !o.terminal {
                    a[(s, o.next)] -= gamma * p_a * o.prob;
                }
            }
        }
    }
    let lu = a.lu();
    let scale = lu.u().diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if !(min_pivot > 1e-12 * scale.max(1.0)) {
        return Err(ModelError::Singular(gamma));
    }
    let v = lu.solve(&b).ok_or(ModelError::Singular(gamma))?;
    Ok(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states: action 0 in state 0 ends with reward 1, action 1 loops.
    fn chain() -> TabularMdp {
        let rows = vec![
            vec![Outcome { next: 1, prob: 1.0, reward: 1.0, terminal: true }],
            vec![Outcome { next: 0, prob: 1.0, reward: 0.0, terminal: false }],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0, terminal: true }],
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0, terminal: true }],
        ];
        TabularMdp::new(2, 2, rows).unwrap()
    }

    #[test]
    fn finite_and_infinite_evaluation() {
        let m = chain();
        let looping = TabularPolicy::deterministic("loop", &[1, 0], 2);
        let (v, _) = finite_horizon_q(&m, &looping, 0.5, 3);
        assert_eq!(v[0], 0.0);
        let stop = TabularPolicy::deterministic("stop", &[0, 0], 2);
        let v = solve_policy_values(&m, &stop, 0.9).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(matches!(solve_policy_values(&m, &looping, 1.0), Err(ModelError::Singular(_))));
    }

    #[test]
    fn mixture_merges_outcomes() {
        let m = chain();
        let mix = TabularMdp::mixture(&[(0.3, &m), (0.7, &m)]).unwrap();
        assert_eq!(mix.outcomes(0, 0).len(), 1);
        assert!(mix.max_row_error() < 1e-15);
        let bad = TabularMdp::new(1, 1, vec![vec![Outcome { next: 0, prob: 0.5, reward: 0.0, terminal: true }]]).unwrap();
        assert!(bad.check_stochastic(1e-9).is_err());
    }

    #[test]
    fn posterior_mixes_branches() {
        let m = chain();
        let model = BranchedModel {
            branches: vec![
                Branch { weight: 0.5, initial: vec![1.0, 0.0], mdp: m.clone() },
                Branch { weight: 0.5, initial: vec![0.5, 0.5], mdp: m },
            ],
            horizon: 2,
        };
        let post = model.branch_posterior(0);
        assert!((post[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(model.branch_posterior(1), vec![0.0, 1.0]);
    }
}
