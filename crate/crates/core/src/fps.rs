//! First-glance policy selection: partition the logged participants by
//! initial state, optionally augment each subgroup with synthetic
//! trajectories, pick the policy with the largest estimated improvement
//! over the behavior policy per subgroup, and deploy by subgroup lookup.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{SepsisState, Trajectory, TreatmentAction, N_ACTIONS, N_STATES};
use crate::ope::{d_hat, mean_return, OpeError};
use crate::policy::TabularPolicy;
use crate::rng::derive_seed;
use crate::sepsis::Terminal;
use crate::subgroup::{
    assign_arrival, encode_state_index, fit_partition, select_m, ArrivalMetric, FitConfig, Partition, PartitionData,
    SubgroupError, SEPSIS_ENCODING,
};
use crate::trajgen::{sample_trajectories, train, SeqVae, TrainConfig, TrajGenError, VaeShape};

#[derive(Debug, Error)]
pub enum FpsError {
    #[error("no candidate policies")]
    NoPolicies,

    #[error("empty offline dataset")]
    EmptyData,

    #[error("duplicate candidate policy id {0}")]
    DuplicatePolicy(String),

    #[error("partition stage: {0}")]
    Partition(#[from] SubgroupError),

    #[error("augmentation stage, subgroup {subgroup}: {source}")]
    Augment {
        subgroup: usize,
        #[source]
        source: TrajGenError,
    },

    #[error("estimation stage, subgroup {subgroup:?}, policy {policy}: {source}")]
    Estimate {
        subgroup: Option<usize>,
        policy: String,
        #[source]
        source: OpeError,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("table serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

// ── State spaces ────────────────────────────────────────────────────────

/// What the pipeline needs to know about a tabular domain.
pub trait StateSpace: Sync {
    fn encoding(&self) -> String;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Numeric embedding used for partitioning and arrival assignment.
    fn features(&self, s: usize) -> Vec<f64>;
    /// Whether a transition into `next` under `action` ends the episode.
    fn ends_episode(&self, next: usize, action: usize) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SepsisSpace;

impl StateSpace for SepsisSpace {
    fn encoding(&self) -> String {
        SEPSIS_ENCODING.into()
    }

    fn n_states(&self) -> usize {
        N_STATES
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn features(&self, s: usize) -> Vec<f64> {
        encode_state_index(s)
    }

    fn ends_episode(&self, next: usize, action: usize) -> bool {
        let s = SepsisState::decode(next).expect("valid sepsis state index");
        Terminal::classify(&s, TreatmentAction::from_index(action)) != Terminal::None
    }
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hidden: usize,
    pub latent: usize,
    pub train: TrainConfig,
    /// Synthetic trajectories per real one.
    pub ratio: f64,
    pub horizon: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hidden: 64, latent: 8, train: TrainConfig::default(), ratio: 1.0, horizon: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpsConfig {
    /// Candidate subgroup counts searched by silhouette.
    pub m_min: usize,
    pub m_max: usize,
    /// Forces the subgroup count and skips the search.
    pub m: Option<usize>,
    pub fit: FitConfig,
    pub arrival_metric: ArrivalMetric,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Subgroups smaller than this use the population-level selection.
    pub min_size: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for FpsConfig {
    fn default() -> Self {
        FpsConfig {
            m_min: 2,
            m_max: 8,
            m: None,
            fit: FitConfig::default(),
            arrival_metric: ArrivalMetric::Euclidean,
            augment: Some(AugmentConfig::default()),
            min_size: 5,
            gamma: 0.99,
            seed: 0,
        }
    }
}

impl FpsConfig {
    fn validate(&self) -> Result<(), FpsError> {
        if self.m.is_none() && (self.m_min < 2 || self.m_min > self.m_max) {
            return Err(FpsError::Config(format!("subgroup range {}..={} is invalid", self.m_min, self.m_max)));
        }
        if self.m == Some(0) {
            return Err(FpsError::Config("subgroup count must be positive".into()));
        }
        if let Some(a) = &self.augment {
            if !(a.ratio >= 0.0) || a.horizon == 0 {
                return Err(FpsError::Config("augmentation ratio must be ≥ 0 and horizon ≥ 1".into()));
            }
        }
        Ok(())
    }
}

// ── Selection table ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEstimate {
    pub policy_id: String,
    pub d_hat: f64,
    /// Weight-based variance bound; `None` when unbounded.
    pub variance_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub subgroup: usize,
    pub best_policy: String,
    pub estimates: Vec<PolicyEstimate>,
    /// Mean return of the estimation data; `value + d_hat` estimates `V^π`.
    pub behavior_value: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
    /// Fewer than `min_size` members: the row holds the population selection.
    pub small_subgroup: bool,
}

impl SelectionRow {
    pub fn estimate(&self, policy: &str) -> Option<&PolicyEstimate> {
        self.estimates.iter().find(|e| e.policy_id == policy)
    }

    /// Estimated value of the selected policy for this subgroup.
    pub fn selected_value(&self) -> f64 {
        self.behavior_value + self.estimate(&self.best_policy).map_or(0.0, |e| e.d_hat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub partition: Partition,
    pub rows: Vec<SelectionRow>,
    pub policy_ids: Vec<String>,
    pub behavior_id: String,
    /// The population-level row computed on all real data.
    pub population: SelectionRow,
    /// `(M, silhouette)` per searched candidate; empty when M was forced.
    pub m_scores: Vec<(usize, Option<f64>)>,
    pub config: FpsConfig,
}

impl SelectionTable {
    pub fn to_json(&self) -> Result<String, FpsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, FpsError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn subgroup_of(&self, features: &[f64]) -> Result<usize, FpsError> {
        Ok(assign_arrival(features, &self.partition, self.config.arrival_metric)?)
    }
}

/// Argmax of `D̂`; ties go to the smaller variance bound, then to `β`,
/// then to the lexicographically smallest id.
fn pick(estimates: &[PolicyEstimate], behavior_id: &str) -> String {
    const TIE: f64 = 1e-12;
    let bound = |e: &PolicyEstimate| e.variance_bound.unwrap_or(f64::INFINITY);
    let best = estimates.iter().map(|e| e.d_hat).fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&PolicyEstimate> = estimates.iter().filter(|e| e.d_hat >= best - TIE).collect();
    let low = tied.iter().map(|e| bound(e)).fold(f64::INFINITY, f64::min);
    tied.retain(|e| bound(e) <= low || (low.is_infinite() && bound(e).is_infinite()));
    if let Some(b) = tied.iter().find(|e| e.policy_id == behavior_id) {
        return b.policy_id.clone();
    }
    tied.iter().map(|e| e.policy_id.clone()).min().expect("at least one candidate")
}

fn estimate_row(
    subgroup: Option<usize>,
    data: &[Trajectory],
    n_real: usize,
    policies: &[&TabularPolicy],
    beta: &TabularPolicy,
    gamma: f64,
) -> Result<SelectionRow, FpsError> {
    let err = |policy: &str, source| FpsError::Estimate { subgroup, policy: policy.into(), source };
    let estimates = policies
        .iter()
        .map(|pi| {
            let r = d_hat(data, pi, beta, gamma).map_err(|e| err(&pi.id, e))?;
            Ok(PolicyEstimate {
                policy_id: pi.id.clone(),
                d_hat: r.value,
                variance_bound: r.variance_bound.filter(|b| b.is_finite()),
            })
        })
        .collect::<Result<Vec<_>, FpsError>>()?;
    Ok(SelectionRow {
        subgroup: subgroup.unwrap_or(usize::MAX),
        best_policy: pick(&estimates, &beta.id),
        behavior_value: mean_return(data, gamma).map_err(|e| err(&beta.id, e))?,
        estimates,
        n_real,
        n_synthetic: data.len() - n_real,
        small_subgroup: false,
    })
}

// ── Training ────────────────────────────────────────────────────────────

/// Partitions participants by their encoded initial states: the forced
/// subgroup count if set, else the silhouette search over the configured
/// range. Returns the partition and the per-candidate scores.
pub fn partition_participants<S: StateSpace>(
    data: &[Trajectory],
    space: &S,
    config: &FpsConfig,
) -> Result<(Partition, Vec<(usize, Option<f64>)>), FpsError> {
    config.validate()?;
    let pdata = PartitionData::from_trajectories(data, config.fit.mode, |s| space.features(s), space.encoding());
    let fit = FitConfig { seed: derive_seed(config.seed, &[1]), ..config.fit };
    match config.m {
        Some(m) => Ok((fit_partition(&pdata, &FitConfig { m, ..fit })?, Vec::new())),
        None => {
            let hi = config.m_max.min(data.len().saturating_sub(1));
            let range: RangeInclusive<usize> = config.m_min..=hi;
            let sel = select_m(&pdata, range, &fit)?;
            Ok((sel.partition, sel.scores))
        }
    }
}

/// Trains a generator on one subgroup and samples `n` synthetic
/// trajectories under `beta`, with ids from `first_id`.
pub fn augment_subgroup<S: StateSpace>(
    real: &[Trajectory],
    beta: &TabularPolicy,
    space: &S,
    aug: &AugmentConfig,
    n: usize,
    first_id: u64,
    seed: u64,
) -> Result<(SeqVae, Vec<Trajectory>), TrajGenError> {
    let shape = VaeShape { n_states: space.n_states(), n_actions: space.n_actions(), hidden: aug.hidden, latent: aug.latent };
    let (model, _) = train(real, shape, &TrainConfig { seed, ..aug.train })?;
    let synth = sample_trajectories(&model, beta, n, aug.horizon, first_id, derive_seed(seed, &[3]), |x, a| space.ends_episode(x, a));
    Ok((model, synth))
}

/// Training phase: partition, optional per-subgroup augmentation, and
/// per-subgroup selection. Deterministic given the config seed.
pub fn fps_train<S: StateSpace>(
    data: &[Trajectory],
    policies: &[&TabularPolicy],
    beta: &TabularPolicy,
    space: &S,
    config: &FpsConfig,
) -> Result<SelectionTable, FpsError> {
    config.validate()?;
    if policies.is_empty() {
        return Err(FpsError::NoPolicies);
    }
    if data.is_empty() {
        return Err(FpsError::EmptyData);
    }
    let mut seen = std::collections::HashSet::new();
    for p in policies {
        if !seen.insert(p.id.as_str()) {
            return Err(FpsError::DuplicatePolicy(p.id.clone()));
        }
    }

    let (partition, m_scores) = partition_participants(data, space, config)?;

    let population = estimate_row(None, data, data.len(), policies, beta, config.gamma)?;
    let by_id: BTreeMap<u64, &Trajectory> = data.iter().map(|t| (t.participant_id, t)).collect();
    let max_id = by_id.keys().next_back().copied().unwrap_or(0);
    let members: Vec<Vec<Trajectory>> = partition
        .clusters
        .iter()
        .map(|c| c.member_ids.iter().map(|id| by_id[id].clone()).collect())
        .collect();

    // Synthetic ids are disjoint across subgroups: subgroup m starts after
    // the synthetic blocks of subgroups 0..m.
    let mut first_ids = Vec::with_capacity(members.len());
    let mut next = max_id + 1;
    for ms in &members {
        first_ids.push(next);
        let n_syn = config.augment.as_ref().map_or(0, |a| (ms.len() as f64 * a.ratio).round() as u64);
        next += n_syn;
    }

    let rows = members
        .par_iter()
        .enumerate()
        .map(|(m, real)| {
            if real.len() < config.min_size {
                return Ok(SelectionRow {
                    subgroup: m,
                    n_real: real.len(),
                    n_synthetic: 0,
                    small_subgroup: true,
                    ..population.clone()
                });
            }
            let mut pool = real.clone();
            if let Some(aug) = &config.augment {
                let n_syn = (real.len() as f64 * aug.ratio).round() as usize;
                if n_syn > 0 {
                    let seed = derive_seed(config.seed, &[2, m as u64]);
                    let (_, synth) = augment_subgroup(real, beta, space, aug, n_syn, first_ids[m], seed)
                        .map_err(|source| FpsError::Augment { subgroup: m, source })?;
                    pool.extend(synth);
                }
            }
            let mut row = estimate_row(Some(m), &pool, real.len(), policies, beta, config.gamma)?;
            row.subgroup = m;
            Ok(row)
        })
        .collect::<Result<Vec<_>, FpsError>>()?;

    Ok(SelectionTable {
        partition,
        rows,
        policy_ids: policies.iter().map(|p| p.id.clone()).collect(),
        behavior_id: beta.id.clone(),
        population,
        m_scores,
        config: config.clone(),
    })
}

/// The pipeline with augmentation removed.
pub fn fps_nota<S: StateSpace>(
    data: &[Trajectory],
    policies: &[&TabularPolicy],
    beta: &TabularPolicy,
    space: &S,
    config: &FpsConfig,
) -> Result<SelectionTable, FpsError> {
    fps_train(data, policies, beta, space, &FpsConfig { augment: None, ..config.clone() })
}

// ── Deployment ──────────────────────────────────────────────────────────

/// Policy for an arrival, decided from its initial-state features alone.
pub fn fps_deploy<'t>(features: &[f64], table: &'t SelectionTable) -> Result<&'t str, FpsError> {
    let m = table.subgroup_of(features)?;
    Ok(&table.rows[m].best_policy)
}

/// [`fps_deploy`] for an initial state index of `space`.
pub fn fps_deploy_state<'t, S: StateSpace>(s0: usize, space: &S, table: &'t SelectionTable) -> Result<&'t str, FpsError> {
    fps_deploy(&space.features(s0), table)
}

/// The policy selected by the most subgroups; ties go to the larger total
/// member count, then to the lexicographically smallest id.
pub fn fps_p(table: &SelectionTable) -> &str {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &table.rows {
        let e = tally.entry(r.best_policy.as_str()).or_default();
        e.0 += 1;
        e.1 += r.n_real;
    }
    // BTreeMap iterates ids in ascending order, so strict comparison keeps
    // the smallest id among full ties.
    let mut best: Option<(&str, (usize, usize))> = None;
    for (id, t) in tally {
        if best.is_none_or(|(_, b)| t > b) {
            best = Some((id, t));
        }
    }
    best.map_or(table.population.best_policy.as_str(), |(id, _)| id)
}
