//! The method sweep: one cell per (size, run, method), each isolated from
//! the others' failures.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use fps_core::fps::{fps_p, fps_train, FpsConfig, SelectionTable, SepsisSpace};
use fps_core::mdp::{Trajectory, N_ACTIONS, N_STATES};
use fps_core::ope::{
    fqe, fqe_estimate, magic_estimate, pdis_estimate, rrs, rrs_sized, wdr_estimate, wis_estimate, EstimateReport, FqeConfig,
    MagicConfig, OpeError,
};
use fps_core::policy::TabularPolicy;
use fps_core::rng::{derive_seed, stream_rng};
use fps_core::trajgen::{sample_trajectories, train, TrainConfig, VaeShape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, Method, RrsMode};
use crate::metrics::{metric_ae, metric_mae, metric_regret1};
use crate::report::{BenchReport, Provenance};
use crate::suite::SepsisSuite;
use crate::BenchError;

// ── Cells ───────────────────────────────────────────────────────────────

/// Metrics of one method on one (size, run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// Error of the estimated value of what was deployed, on the
    /// discounted scale the estimators target.
    pub ae: f64,
    /// Mean absolute error over every candidate policy.
    pub mae: f64,
    pub return_discounted: f64,
    pub return_undiscounted: f64,
    pub regret_discounted: f64,
    pub regret_undiscounted: f64,
    /// Arrivals per deployed policy.
    pub deployed: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub n: usize,
    pub run: usize,
    pub seed: u64,
    /// `ok` or `error:<stage>`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CellMetrics>,
}

#[derive(Debug)]
struct CellError {
    stage: &'static str,
    message: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> CellError {
    move |e| CellError { stage, message: e.to_string() }
}

/// Everything the cells of one (size, run) share.
pub struct RunContext {
    pub n: usize,
    pub run: usize,
    pub seed: u64,
    pub data: Vec<Trajectory>,
    pub arrivals: Vec<usize>,
    /// Generator output for VRRS, or the reason it is missing.
    pub synthetic: Option<Result<Vec<Trajectory>, String>>,
}

impl RunContext {
    pub fn build(suite: &SepsisSuite, config: &BenchConfig, n: usize, run: usize) -> Result<Self, BenchError> {
        let seed = derive_seed(config.seed, &[n as u64, run as u64]);
        let data = suite.env.generate_dataset(&suite.behavior, n, derive_seed(seed, &[1]))?.trajectories;
        let arrivals_seed = derive_seed(seed, &[2]);
        let arrivals = (0..config.arrivals as u64)
            .map(|i| suite.env.sample_initial(&mut stream_rng(arrivals_seed, i)).0.encode())
            .collect();
        let synthetic = (config.rrs == RrsMode::Vrrs).then(|| {
            let aug = &config.augment;
            let shape = VaeShape { n_states: N_STATES, n_actions: N_ACTIONS, hidden: aug.hidden, latent: aug.latent };
            let vae_seed = derive_seed(seed, &[6]);
            let first_id = data.iter().map(|t| t.participant_id).max().unwrap_or(0) + 1;
            train(&data, shape, &TrainConfig { seed: vae_seed, ..aug.train })
                .map(|(model, _)| {
                    let n_syn = (data.len() as f64 * aug.ratio).round() as usize;
                    sample_trajectories(&model, &suite.behavior, n_syn, aug.horizon, first_id, derive_seed(vae_seed, &[1]), |x, a| {
                        fps_core::fps::StateSpace::ends_episode(&SepsisSpace, x, a)
                    })
                })
                .map_err(|e| e.to_string())
        });
        Ok(RunContext { n, run, seed, data, arrivals, synthetic })
    }
}

fn baseline_estimate(
    method: Method,
    trajs: &[Trajectory],
    pi: &TabularPolicy,
    beta: &TabularPolicy,
    gamma: f64,
    magic: &MagicConfig,
) -> Result<EstimateReport, OpeError> {
    match method {
        Method::Wis => wis_estimate(trajs, pi, beta, gamma),
        Method::Pdis => pdis_estimate(trajs, pi, beta, gamma),
        Method::Fqe => fqe_estimate(trajs, &fqe(trajs, pi, gamma, FqeConfig::default())?),
        Method::Wdr => wdr_estimate(trajs, pi, beta, gamma, &fqe(trajs, pi, gamma, FqeConfig::default())?),
        Method::Magic => {
            let fit = fqe(trajs, pi, gamma, FqeConfig::default())?;
            Ok(magic_estimate(trajs, pi, beta, gamma, &fit, magic)?.report)
        }
        Method::Fps | Method::FpsNota | Method::FpsP => unreachable!("not an estimator baseline"),
    }
}

/// Return, regret and deployment counts for per-arrival selections.
fn deployment_metrics(suite: &SepsisSuite, selected: &[(usize, &str)]) -> Result<CellMetrics, BenchError> {
    let ids = suite.candidate_ids();
    let mut deployed = BTreeMap::new();
    let (mut ret_d, mut ret_u) = (0.0, 0.0);
    for &(s0, p) in selected {
        *deployed.entry(p.to_string()).or_insert(0) += 1;
        ret_d += suite.oracle.value(p, s0)?;
        ret_u += suite.oracle_undiscounted.value(p, s0)?;
    }
    let k = selected.len() as f64;
    Ok(CellMetrics {
        ae: 0.0,
        mae: 0.0,
        return_discounted: ret_d / k,
        return_undiscounted: ret_u / k,
        regret_discounted: metric_regret1(selected, &ids, &suite.oracle)?,
        regret_undiscounted: metric_regret1(selected, &ids, &suite.oracle_undiscounted)?,
        deployed,
    })
}

fn fps_cell(suite: &SepsisSuite, config: &BenchConfig, ctx: &RunContext, method: Method) -> Result<CellMetrics, CellError> {
    let fcfg = FpsConfig {
        seed: derive_seed(ctx.seed, &[3]),
        gamma: config.env.gamma,
        augment: if method == Method::FpsNota { None } else { config.fps.augment.clone() },
        ..config.fps.clone()
    };
    let table: SelectionTable =
        fps_train(&ctx.data, &suite.candidate_refs(), &suite.behavior, &SepsisSpace, &fcfg).map_err(stage("fps-train"))?;
    let mut rows = Vec::with_capacity(ctx.arrivals.len());
    for &s0 in &ctx.arrivals {
        let m = table.subgroup_of(&fps_core::subgroup::encode_state_index(s0)).map_err(stage("deploy"))?;
        rows.push((s0, m));
    }
    let ids = suite.candidate_ids();
    // Estimated value of `policy` for an arrival in subgroup `m`.
    let est = |m: usize, policy: &str| {
        let r = &table.rows[m];
        r.behavior_value + r.estimate(policy).map_or(0.0, |e| e.d_hat)
    };
    let k = rows.len() as f64;
    let (selected, est_sel): (Vec<(usize, &str)>, f64) = match method {
        Method::FpsP => {
            let p = fps_p(&table);
            // Member-weighted mean of the subgroup estimates of `p`.
            let total: usize = table.rows.iter().map(|r| r.n_real).sum();
            let e = table.rows.iter().map(|r| r.n_real as f64 * est(r.subgroup, p)).sum::<f64>() / total as f64;
            (rows.iter().map(|&(s0, _)| (s0, p)).collect(), e)
        }
        _ => {
            let sel: Vec<(usize, &str)> = rows.iter().map(|&(s0, m)| (s0, table.rows[m].best_policy.as_str())).collect();
            let e = rows.iter().map(|&(_, m)| table.rows[m].selected_value()).sum::<f64>() / k;
            (sel, e)
        }
    };
    let mut out = deployment_metrics(suite, &selected).map_err(stage("metrics"))?;
    let true_sel = selected.iter().map(|&(s0, p)| suite.oracle.value(p, s0)).sum::<Result<f64, _>>().map_err(stage("metrics"))? / k;
    out.ae = metric_ae(true_sel, est_sel);
    let mut aes = Vec::with_capacity(ids.len());
    for p in &ids {
        let e = rows.iter().map(|&(_, m)| est(m, p)).sum::<f64>() / k;
        aes.push(metric_ae(suite.oracle.cohort_mean(p, &ctx.arrivals).map_err(stage("metrics"))?, e));
    }
    out.mae = metric_mae(&aes).map_err(stage("metrics"))?;
    Ok(out)
}

fn baseline_cell(suite: &SepsisSuite, config: &BenchConfig, ctx: &RunContext, method: Method) -> Result<CellMetrics, CellError> {
    let gamma = config.env.gamma;
    let magic = MagicConfig { bootstrap: config.magic_bootstrap, seed: derive_seed(ctx.seed, &[5]), ..Default::default() };
    let rrs_seed = derive_seed(ctx.seed, &[4]);
    let pool: Vec<Trajectory> = match (&config.rrs, &ctx.synthetic) {
        (RrsMode::Vrrs, Some(Ok(syn))) => ctx.data.iter().chain(syn).cloned().collect(),
        (RrsMode::Vrrs, Some(Err(e))) => return Err(CellError { stage: "augment", message: e.clone() }),
        _ => Vec::new(),
    };
    let mut estimates = Vec::with_capacity(suite.candidates.len());
    for pi in &suite.candidates {
        let f = |t: &[Trajectory]| baseline_estimate(method, t, pi, &suite.behavior, gamma, &magic);
        let r = match config.rrs {
            RrsMode::Off => f(&ctx.data),
            RrsMode::Rrs => rrs(&ctx.data, config.rrs_reps, rrs_seed, f),
            RrsMode::Vrrs => rrs_sized(&pool, pool.len(), config.rrs_reps, rrs_seed, f),
        }
        .map_err(stage("estimate"))?;
        if !r.value.is_finite() {
            return Err(CellError { stage: "estimate", message: format!("non-finite estimate for {}", pi.id) });
        }
        estimates.push((pi.id.as_str(), r.value));
    }
    // Population-level selection; ties keep the earlier candidate.
    let (best, est_best) = estimates.iter().fold(estimates[0], |acc, &e| if e.1 > acc.1 { e } else { acc });
    let selected: Vec<(usize, &str)> = ctx.arrivals.iter().map(|&s0| (s0, best)).collect();
    let mut out = deployment_metrics(suite, &selected).map_err(stage("metrics"))?;
    out.ae = metric_ae(suite.oracle.cohort_mean(best, &ctx.arrivals).map_err(stage("metrics"))?, est_best);
    let mut aes = Vec::with_capacity(estimates.len());
    for (p, e) in &estimates {
        aes.push(metric_ae(suite.oracle.cohort_mean(p, &ctx.arrivals).map_err(stage("metrics"))?, *e));
    }
    out.mae = metric_mae(&aes).map_err(stage("metrics"))?;
    Ok(out)
}

/// Runs one cell behind a panic boundary.
pub fn run_cell(suite: &SepsisSuite, config: &BenchConfig, ctx: &RunContext, method: Method) -> Cell {
    let result = catch_unwind(AssertUnwindSafe(|| {
        if method.is_fps() {
            fps_cell(suite, config, ctx, method)
        } else {
            baseline_cell(suite, config, ctx, method)
        }
    }))
    .unwrap_or_else(|p| {
        let message = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(CellError { stage: "panic", message })
    });
    let base = Cell { method: config.label(method), n: ctx.n, run: ctx.run, seed: ctx.seed, status: "ok".into(), message: None, metrics: None };
    match result {
        Ok(m) => Cell { metrics: Some(m), ..base },
        Err(e) => Cell { status: format!("error:{}", e.stage), message: Some(e.message), ..base },
    }
}

// ── Sweep ───────────────────────────────────────────────────────────────

/// Generates every dataset, evaluates every method and aggregates runs.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let suite = SepsisSuite::build(&config.env, config.antibiotic_scope)?;
    run_with_suite(&suite, config)
}

pub fn run_with_suite(suite: &SepsisSuite, config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let keys: Vec<(usize, usize)> = config.sizes.iter().flat_map(|&n| (0..config.runs).map(move |r| (n, r))).collect();
    let contexts = keys
        .par_iter()
        .map(|&(n, r)| RunContext::build(suite, config, n, r))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(&RunContext, Method)> = contexts.iter().flat_map(|c| config.methods.iter().map(move |&m| (c, m))).collect();
    let cells: Vec<Cell> = jobs.par_iter().map(|&(ctx, m)| run_cell(suite, config, ctx, m)).collect();
    Ok(BenchReport::assemble(config, Provenance::new(config), cells))
}
