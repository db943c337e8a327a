//! Partitioning participants into subgroups and assigning new arrivals.
//!
//! Each cluster is a Gaussian Markov random field over the feature vector:
//! a mean and a regularized inverse covariance `(Σ̂ + λI)⁻¹`. Fitting is hard
//! EM on the Gaussian log-likelihood; in trajectory mode every point of a
//! participant's sequence is assigned and switching clusters between
//! consecutive points costs `ε`, solved per sequence by dynamic programming.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{SepsisState, Trajectory, Vital};
use crate::ope::{d_hat, OpeError};
use crate::policy::TabularPolicy;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum SubgroupError {
    #[error("no participants to partition")]
    EmptyData,

    #[error("participant {0} has an empty feature sequence")]
    EmptySequence(u64),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("participant id {0} appears more than once")]
    DuplicateId(u64),

    #[error("{distinct} distinct feature vectors cannot form {m} clusters")]
    TooFewPoints { distinct: usize, m: usize },

    #[error("invalid cluster count range: {0}")]
    InvalidRange(String),

    #[error("every candidate cluster count failed to fit")]
    AllDegenerate,

    #[error("partition has no clusters")]
    NoClusters,

    #[error("participant {0} is not in the partition")]
    UnknownParticipant(u64),

    #[error("covariance of cluster {0} is not positive definite")]
    NotPositiveDefinite(usize),

    #[error(transparent)]
    Estimator(#[from] OpeError),
}

// ── Feature encoding ────────────────────────────────────────────────────

pub const SEPSIS_FEATURE_DIM: usize = 8;
pub const SEPSIS_ENCODING: &str = "sepsis-v1[heart_rate,blood_pressure,oxygen,glucose,diabetic,abx_on,vaso_on,vent_on]";

/// Vitals centered at their normal level (low/normal/high → −1/0/+1,
/// glucose −2..+2, oxygen −1/0); flags as 0/1.
pub fn encode_features(s: &SepsisState) -> Vec<f64> {
    fn centered<V: Vital>(v: V) -> f64 {
        v.level() as f64 - V::NORMAL as f64
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        centered(s.heart_rate),
        centered(s.blood_pressure),
        centered(s.oxygen),
        centered(s.glucose),
        flag(s.diabetic),
        flag(s.abx_on),
        flag(s.vaso_on),
        flag(s.vent_on),
    ]
}

/// Encodes a state index; panics on indices outside the sepsis space.
pub fn encode_state_index(s: usize) -> Vec<f64> {
    encode_features(&SepsisState::decode(s).expect("valid sepsis state index"))
}

// ── Input data ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// One point per participant: the initial state.
    #[default]
    InitialState,
    /// Every visited state, with a switching penalty along each sequence.
    Trajectory,
}

/// Feature sequences keyed by participant; element 0 is the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionData {
    pub ids: Vec<u64>,
    pub sequences: Vec<Vec<Vec<f64>>>,
    pub encoding: String,
}

impl PartitionData {
    pub fn from_points(ids: Vec<u64>, points: Vec<Vec<f64>>, encoding: impl Into<String>) -> Self {
        PartitionData {
            ids,
            sequences: points.into_iter().map(|p| vec![p]).collect(),
            encoding: encoding.into(),
        }
    }

    /// Sequences from logged trajectories. Initial-state mode keeps only
    /// the first state; trajectory mode keeps every logged state.
    pub fn from_trajectories<F>(trajs: &[Trajectory], mode: PartitionMode, encode: F, encoding: impl Into<String>) -> Self
    where
        F: Fn(usize) -> Vec<f64>,
    {
        let sequences = trajs
            .iter()
            .map(|t| match mode {
                PartitionMode::InitialState => vec![encode(t.initial_state())],
                PartitionMode::Trajectory => t.steps.iter().map(|s| encode(s.state)).collect(),
            })
            .collect();
        PartitionData {
            ids: trajs.iter().map(|t| t.participant_id).collect(),
            sequences,
            encoding: encoding.into(),
        }
    }

    pub fn sepsis(trajs: &[Trajectory], mode: PartitionMode) -> Self {
        Self::from_trajectories(trajs, mode, encode_state_index, SEPSIS_ENCODING)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn validate(&self) -> Result<usize, SubgroupError> {
        if self.ids.is_empty() {
            return Err(SubgroupError::EmptyData);
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if !seen.insert(*id) {
                return Err(SubgroupError::DuplicateId(*id));
            }
        }
        let dim = self.sequences.first().and_then(|s| s.first()).map_or(0, Vec::len);
        for (id, seq) in self.ids.iter().zip(&self.sequences) {
            if seq.is_empty() {
                return Err(SubgroupError::EmptySequence(*id));
            }
            for x in seq {
                if x.len() != dim {
                    return Err(SubgroupError::Dimension { expected: dim, got: x.len() });
                }
            }
        }
        Ok(dim)
    }
}

/// Distinct points in canonical (lexicographic) order, so fitting does not
/// depend on input order.
struct Unique {
    points: Vec<Vec<f64>>,
    /// `index[i][t]` is the unique index of point `t` of sequence `i`.
    index: Vec<Vec<usize>>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn dedupe(sequences: &[Vec<Vec<f64>>]) -> Unique {
    let mut map: BTreeMap<Vec<u64>, Vec<f64>> = BTreeMap::new();
    for seq in sequences {
        for x in seq {
            map.entry(key(x)).or_insert_with(|| x.clone());
        }
    }
    let mut points: Vec<Vec<f64>> = map.into_values().collect();
    points.sort_by(|a, b| lex_cmp(a, b));
    let lookup: HashMap<Vec<u64>, usize> = points.iter().enumerate().map(|(i, p)| (key(p), i)).collect();
    let index = sequences.iter().map(|seq| seq.iter().map(|x| lookup[&key(x)]).collect()).collect();
    Unique { points, index }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ── Partition ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub x: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub inverse_covariance: Vec<f64>,
    pub log_det_covariance: f64,
    pub member_ids: Vec<u64>,
    /// Distinct member initial-state features with multiplicities.
    pub member_points: Vec<WeightedPoint>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    fn precision(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.inverse_covariance)
    }

    /// Gaussian log-density of `x`.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let quad = (diff.transpose() * self.precision() * &diff)[(0, 0)];
        -0.5 * (quad + self.log_det_covariance + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMetric {
    #[default]
    Euclidean,
    Mahalanobis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub m: usize,
    pub clusters: Vec<Cluster>,
    pub feature_encoding: String,
    pub mode: PartitionMode,
    pub epsilon: f64,
    pub lambda: f64,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
}

impl Partition {
    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.mean.len())
    }

    /// Cluster index of a training participant.
    pub fn cluster_of(&self, id: u64) -> Option<usize> {
        self.clusters.iter().position(|c| c.member_ids.contains(&id))
    }

    /// `participant id → cluster index` for every member.
    pub fn membership(&self) -> HashMap<u64, usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(m, c)| c.member_ids.iter().map(move |id| (*id, m)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    /// Builds a partition from explicit labels (`labels[i]` in `0..m`),
    /// fitting each cluster's Gaussian to its members' initial points.
    pub fn from_labels(data: &PartitionData, labels: &[usize], m: usize, lambda: f64) -> Result<Self, SubgroupError> {
        let dim = data.validate()?;
        if labels.len() != data.len() {
            return Err(SubgroupError::Dimension { expected: data.len(), got: labels.len() });
        }
        let points: Vec<(&[f64], usize, f64)> = data
            .sequences
            .iter()
            .zip(labels)
            .map(|(s, &l)| (s[0].as_slice(), l, 1.0))
            .collect();
        let models = m_step(&points, m, dim, lambda)?;
        Ok(finish(data, labels, models, FitConfig { m, lambda, ..FitConfig::default() }, true, 0))
    }
}

// ── Fitting ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub m: usize,
    pub epsilon: f64,
    pub mode: PartitionMode,
    pub seed: u64,
    pub lambda: f64,
    pub max_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { m: 2, epsilon: 0.0, mode: PartitionMode::InitialState, seed: 0, lambda: 1e-3, max_iters: 100 }
    }
}

struct Gaussian {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Gaussian {
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let quad = (diff.transpose() * &self.precision * &diff)[(0, 0)];
        -0.5 * (quad + self.log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Weighted mean and regularized MLE covariance per cluster.
fn m_step(points: &[(&[f64], usize, f64)], m: usize, dim: usize, lambda: f64) -> Result<Vec<Gaussian>, SubgroupError> {
    let mut weight = vec![0.0; m];
    let mut sums = vec![vec![0.0; dim]; m];
    for (x, c, w) in points {
        weight[*c] += w;
        for (s, v) in sums[*c].iter_mut().zip(*x) {
            *s += w * v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&weight)
        .map(|(s, w)| s.iter().map(|v| if *w > 0.0 { v / w } else { 0.0 }).collect())
        .collect();
    let mut covs = vec![DMatrix::<f64>::zeros(dim, dim); m];
    for (x, c, w) in points {
        let diff = DVector::from_iterator(dim, x.iter().zip(&means[*c]).map(|(a, b)| a - b));
        covs[*c] += (&diff * diff.transpose()) * *w;
    }
    means
        .into_iter()
        .zip(covs)
        .zip(&weight)
        .enumerate()
        .map(|(k, ((mean, cov), w))| {
            let cov = if *w > 0.0 { cov / *w } else { cov } + DMatrix::identity(dim, dim) * lambda;
            let chol = cov.cholesky().ok_or(SubgroupError::NotPositiveDefinite(k))?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Ok(Gaussian { mean, precision: chol.inverse(), log_det })
        })
        .collect()
}

/// k-means++ seeding over distinct points weighted by multiplicity.
fn seed_centers(uniq: &[Vec<f64>], counts: &[f64], m: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, 0x5eed);
    let pick = |weights: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
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
    };
    let mut centers = vec![pick(counts, &mut rng)];
    let mut d2: Vec<f64> = uniq.iter().map(|p| euclid(p, &uniq[centers[0]]).powi(2)).collect();
    while centers.len() < m {
        let w: Vec<f64> = d2.iter().zip(counts).map(|(d, c)| d * c).collect();
        let next = if w.iter().sum::<f64>() > 0.0 {
            pick(&w, &mut rng)
        } else {
            (0..uniq.len()).find(|i| !centers.contains(i)).expect("enough distinct points")
        };
        centers.push(next);
        for (d, p) in d2.iter_mut().zip(uniq) {
            *d = d.min(euclid(p, &uniq[next]).powi(2));
        }
    }
    centers
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Minimizes `Σ_t −ll[x_t][m_t] + ε·1{m_t ≠ m_{t−1}}` along one sequence.
/// Ties go to the lower cluster index.
fn viterbi(seq: &[usize], ll: &[Vec<f64>], m: usize, epsilon: f64) -> Vec<usize> {
    let mut cost: Vec<f64> = (0..m).map(|k| -ll[seq[0]][k]).collect();
    let mut back = vec![vec![0usize; m]; seq.len()];
    for t in 1..seq.len() {
        let stay_best = {
            let mut b = 0;
            for k in 1..m {
                if cost[k] < cost[b] {
                    b = k;
                }
            }
            b
        };
        let mut next = vec![0.0; m];
        for k in 0..m {
            let switch = cost[stay_best] + epsilon;
            let (c, from) = if cost[k] <= switch && (cost[k] < switch || k <= stay_best) {
                (cost[k], k)
            } else {
                (switch, stay_best)
            };
            next[k] = c - ll[seq[t]][k];
            back[t][k] = from;
        }
        cost = next;
    }
    let mut last = 0;
    for k in 1..m {
        if cost[k] < cost[last] {
            last = k;
        }
    }
    let mut path = vec![0; seq.len()];
    path[seq.len() - 1] = last;
    for t in (1..seq.len()).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Fits a partition with `config.m` clusters.
pub fn fit_partition(data: &PartitionData, config: &FitConfig) -> Result<Partition, SubgroupError> {
    let dim = data.validate()?;
    let m = config.m;
    if m == 0 {
        return Err(SubgroupError::InvalidRange("at least one cluster required".into()));
    }
    let sequences: Vec<Vec<Vec<f64>>> = match config.mode {
        PartitionMode::InitialState => data.sequences.iter().map(|s| vec![s[0].clone()]).collect(),
        PartitionMode::Trajectory => data.sequences.clone(),
    };
    let uniq = dedupe(&sequences);
    let nu = uniq.points.len();
    if nu < m {
        return Err(SubgroupError::TooFewPoints { distinct: nu, m });
    }
    let mut counts = vec![0.0; nu];
    for seq in &uniq.index {
        for &u in seq {
            counts[u] += 1.0;
        }
    }

    // Initial assignment: nearest seeded center.
    let centers = seed_centers(&uniq.points, &counts, m, config.seed);
    let nearest: Vec<usize> = uniq
        .points
        .iter()
        .map(|p| {
            let d: Vec<f64> = centers.iter().map(|&c| -euclid(p, &uniq.points[c])).collect();
            argmax_first(&d)
        })
        .collect();
    let mut labels: Vec<Vec<usize>> = uniq.index.iter().map(|seq| seq.iter().map(|&u| nearest[u]).collect()).collect();

    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        repair_empty(&mut labels, &uniq, m);
        let models = fit_models(&labels, &uniq, m, dim, config.lambda)?;
        let ll: Vec<Vec<f64>> = uniq.points.iter().map(|p| models.iter().map(|g| g.log_likelihood(p)).collect()).collect();
        let next: Vec<Vec<usize>> = match config.mode {
            PartitionMode::InitialState => uniq.index.iter().map(|seq| vec![argmax_first(&ll[seq[0]])]).collect(),
            PartitionMode::Trajectory => uniq.index.iter().map(|seq| viterbi(seq, &ll, m, config.epsilon)).collect(),
        };
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    repair_empty(&mut labels, &uniq, m);
    let models = fit_models(&labels, &uniq, m, dim, config.lambda)?;

    // Canonical labels: clusters ordered by their smallest distinct point.
    let mut first_point = vec![usize::MAX; m];
    for (seq, lab) in uniq.index.iter().zip(&labels) {
        for (&u, &k) in seq.iter().zip(lab) {
            first_point[k] = first_point[k].min(u);
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&k| (first_point[k], k));
    let mut relabel = vec![0; m];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let mut models: Vec<Option<Gaussian>> = models.into_iter().map(Some).collect();
    let models: Vec<Gaussian> = order.iter().map(|&old| models[old].take().expect("each label once")).collect();
    let initial: Vec<usize> = labels.iter().map(|l| relabel[l[0]]).collect();
    Ok(finish(data, &initial, models, *config, converged, iterations))
}

fn fit_models(labels: &[Vec<usize>], uniq: &Unique, m: usize, dim: usize, lambda: f64) -> Result<Vec<Gaussian>, SubgroupError> {
    let mut tally: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (seq, lab) in uniq.index.iter().zip(labels) {
        for (&u, &k) in seq.iter().zip(lab) {
            *tally.entry((u, k)).or_default() += 1.0;
        }
    }
    let points: Vec<(&[f64], usize, f64)> = tally.iter().map(|(&(u, k), &w)| (uniq.points[u].as_slice(), k, w)).collect();
    m_step(&points, m, dim, lambda)
}

/// Gives every empty cluster the distinct point farthest from the mean of
/// its current cluster (taken from clusters holding ≥ 2 distinct points).
fn repair_empty(labels: &mut [Vec<usize>], uniq: &Unique, m: usize) {
    loop {
        let mut distinct: Vec<HashSet<usize>> = vec![HashSet::new(); m];
        for (seq, lab) in uniq.index.iter().zip(labels.iter()) {
            for (&u, &k) in seq.iter().zip(lab) {
                distinct[k].insert(u);
            }
        }
        let Some(empty) = distinct.iter().position(HashSet::is_empty) else { return };
        let dim = uniq.points[0].len();
        let means: Vec<Vec<f64>> = distinct
            .iter()
            .map(|set| {
                let mut mean = vec![0.0; dim];
                for &u in set {
                    for (a, b) in mean.iter_mut().zip(&uniq.points[u]) {
                        *a += b / set.len() as f64;
                    }
                }
                mean
            })
            .collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for (k, set) in distinct.iter().enumerate() {
            if set.len() < 2 {
                continue;
            }
            let mut members: Vec<usize> = set.iter().copied().collect();
            members.sort_unstable();
            for u in members {
                let d = euclid(&uniq.points[u], &means[k]);
                if best.is_none_or(|b| d > b.0) {
                    best = Some((d, u, k));
                }
            }
        }
        let Some((_, u, from)) = best else { return };
        for (seq, lab) in uniq.index.iter().zip(labels.iter_mut()) {
            for (&p, k) in seq.iter().zip(lab.iter_mut()) {
                if p == u && *k == from {
                    *k = empty;
                }
            }
        }
    }
}

fn finish(data: &PartitionData, initial: &[usize], models: Vec<Gaussian>, config: FitConfig, converged: bool, iterations: usize) -> Partition {
    let m = models.len();
    let mut ids = vec![Vec::new(); m];
    let mut pts: Vec<BTreeMap<Vec<u64>, WeightedPoint>> = vec![BTreeMap::new(); m];
    for ((id, seq), &k) in data.ids.iter().zip(&data.sequences).zip(initial) {
        ids[k].push(*id);
        pts[k]
            .entry(key(&seq[0]))
            .or_insert_with(|| WeightedPoint { x: seq[0].clone(), count: 0 })
            .count += 1;
    }
    let clusters = models
        .into_iter()
        .zip(ids)
        .zip(pts)
        .map(|((g, mut member_ids), pts)| {
            member_ids.sort_unstable();
            let mut member_points: Vec<WeightedPoint> = pts.into_values().collect();
            member_points.sort_by(|a, b| lex_cmp(&a.x, &b.x));
            Cluster {
                inverse_covariance: g.precision.transpose().iter().copied().collect(),
                mean: g.mean,
                log_det_covariance: g.log_det,
                member_ids,
                member_points,
            }
        })
        .collect();
    Partition {
        m,
        clusters,
        feature_encoding: data.encoding.clone(),
        mode: config.mode,
        epsilon: config.epsilon,
        lambda: config.lambda,
        seed: config.seed,
        converged,
        iterations,
    }
}

// ── Model selection ─────────────────────────────────────────────────────

/// Mean silhouette coefficient over partitioned participants (Euclidean on
/// initial-state features). Members of singleton clusters score 0.
pub fn silhouette(p: &Partition) -> f64 {
    let pts: Vec<(usize, &WeightedPoint)> = p
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(k, c)| c.member_points.iter().map(move |w| (k, w)))
        .collect();
    let sizes: Vec<f64> = p.clusters.iter().map(|c| c.len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let sum: f64 = pts
        .par_iter()
        .map(|&(k, wp)| {
            if sizes[k] <= 1.0 {
                return 0.0;
            }
            let mut dist = vec![0.0; p.clusters.len()];
            for &(j, other) in &pts {
                dist[j] += other.count as f64 * euclid(&wp.x, &other.x);
            }
            let a = dist[k] / (sizes[k] - 1.0);
            let b = (0..p.clusters.len())
                .filter(|&j| j != k && sizes[j] > 0.0)
                .map(|j| dist[j] / sizes[j])
                .fold(f64::INFINITY, f64::min);
            let s = if !b.is_finite() || a.max(b) == 0.0 { 0.0 } else { (b - a) / a.max(b) };
            s * wp.count as f64
        })
        .sum();
    sum / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSelection {
    pub best_m: usize,
    /// `(M, silhouette)` for every candidate; `None` when the fit failed.
    pub scores: Vec<(usize, Option<f64>)>,
    pub partition: Partition,
}

/// Fits every candidate `M` and keeps the highest mean silhouette; ties go
/// to the smaller `M`.
pub fn select_m(data: &PartitionData, range: std::ops::RangeInclusive<usize>, base: &FitConfig) -> Result<MSelection, SubgroupError> {
    let n = data.len();
    if range.is_empty() || *range.start() < 2 || *range.end() + 1 > n {
        return Err(SubgroupError::InvalidRange(format!(
            "{}..={} must lie within [2, {}]",
            range.start(),
            range.end(),
            n.saturating_sub(1)
        )));
    }
    let fits: Vec<(usize, Option<(f64, Partition)>)> = range
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|m| {
            let fit = fit_partition(data, &FitConfig { m, ..*base }).ok().map(|p| (silhouette(&p), p));
            (m, fit)
        })
        .collect();
    let scores = fits.iter().map(|(m, f)| (*m, f.as_ref().map(|x| x.0))).collect();
    let mut best: Option<(f64, Partition)> = None;
    for (_, fit) in fits {
        if let Some((s, p)) = fit {
            if best.as_ref().is_none_or(|b| s > b.0 + 1e-12) {
                best = Some((s, p));
            }
        }
    }
    let (_, partition) = best.ok_or(SubgroupError::AllDegenerate)?;
    Ok(MSelection { best_m: partition.m, scores, partition })
}

// ── Deployment ──────────────────────────────────────────────────────────

/// Cluster whose members are closest on average; ties go to the lower index.
pub fn assign_arrival(x: &[f64], p: &Partition, metric: ArrivalMetric) -> Result<usize, SubgroupError> {
    if p.clusters.is_empty() {
        return Err(SubgroupError::NoClusters);
    }
    if x.len() != p.dim() {
        return Err(SubgroupError::Dimension { expected: p.dim(), got: x.len() });
    }
    let mut best = (f64::INFINITY, 0);
    for (k, c) in p.clusters.iter().enumerate() {
        if c.is_empty() {
            continue;
        }
        let dist: f64 = match metric {
            ArrivalMetric::Euclidean => c.member_points.iter().map(|w| w.count as f64 * euclid(x, &w.x)).sum(),
            ArrivalMetric::Mahalanobis => {
                let prec = c.precision();
                c.member_points
                    .iter()
                    .map(|w| {
                        let d = DVector::from_iterator(x.len(), x.iter().zip(&w.x).map(|(a, b)| a - b));
                        w.count as f64 * (d.transpose() * &prec * &d)[(0, 0)].max(0.0).sqrt()
                    })
                    .sum()
            }
        };
        let mean = dist / c.len() as f64;
        if mean < best.0 {
            best = (mean, k);
        }
    }
    Ok(best.1)
}

// ── Objective ───────────────────────────────────────────────────────────

/// `Σ_i max_π D̂^{π,β}` over the subgroup of each participant, i.e.
/// `Σ_m |K_m| · max_π D̂_m`.
pub fn eq1_objective(
    p: &Partition,
    policies: &[&TabularPolicy],
    beta: &TabularPolicy,
    data: &[Trajectory],
    gamma: f64,
) -> Result<f64, SubgroupError> {
    let by_id: HashMap<u64, &Trajectory> = data.iter().map(|t| (t.participant_id, t)).collect();
    let mut total = 0.0;
    for c in &p.clusters {
        if c.is_empty() {
            continue;
        }
        let members: Vec<Trajectory> = c
            .member_ids
            .iter()
            .map(|id| by_id.get(id).map(|t| (*t).clone()).ok_or(SubgroupError::UnknownParticipant(*id)))
            .collect::<Result<_, _>>()?;
        let mut best = f64::NEG_INFINITY;
        for pi in policies {
            best = best.max(d_hat(&members, pi, beta, gamma)?.value);
        }
        total += c.len() as f64 * best;
    }
    Ok(total)
}
