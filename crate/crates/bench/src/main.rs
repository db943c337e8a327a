//! `fps`: dataset generation, the selection pipeline stage by stage, and
//! the benchmark sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fps_bench::{run_benchmark, BenchConfig, BenchReport, Method, RrsMode, SepsisSuite};
use fps_core::fps::{augment_subgroup, fps_deploy_state, fps_train, partition_participants, FpsConfig, SelectionTable, SepsisSpace};
use fps_core::mdp::{load_dataset, save_dataset, DatasetMeta, OfflineDataset, Trajectory, N_STATES};
use fps_core::policy::TabularPolicy;
use fps_core::rng::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "fps", version, about = "First-glance policy selection on a simulated sepsis task")]
struct Cli {
    /// JSON config; any subset of fields, missing ones take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one config field, e.g. `--set env.gamma=0.95`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Base seed; every stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates an offline dataset under the behavior policy.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Plans the candidate policies and writes them with their exact values.
    TrainPolicies,
    /// Partitions a dataset's participants by initial state.
    Partition {
        #[arg(long)]
        data: PathBuf,
        /// Forces the subgroup count instead of searching.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Trains one generator per subgroup and writes the synthetic set.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Builds the per-subgroup selection table.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        /// Candidate set written by `train-policies`; planned afresh if absent.
        #[arg(long)]
        policies: Option<PathBuf>,
        /// Skips trajectory augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Prints the policy a selection table assigns to an initial state.
    Deploy {
        #[arg(long)]
        table: PathBuf,
        /// Encoded initial state index.
        #[arg(long)]
        state: usize,
    },
    /// Runs the method sweep and writes the reports.
    Bench {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        rrs: Option<RrsMode>,
        /// Reports discounted returns instead of undiscounted outcomes.
        #[arg(long)]
        discounted: bool,
        /// Size of each fresh arrival cohort.
        #[arg(long)]
        arrivals: Option<usize>,
    },
    /// Prints the table of a finished benchmark.
    Report {
        /// Defaults to `<out>/report.json`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let text = cli.config.as_ref().map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let mut cfg = BenchConfig::with_overrides(text.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.display().to_string();
    }
    let out = PathBuf::from(&cfg.output);

    match cli.command {
        Command::Simulate { n } => {
            let suite = suite(&cfg)?;
            let d = suite.env.generate_dataset(&suite.behavior, n, derive_seed(cfg.seed, &[1]))?;
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.jsonl");
            save_dataset(&d, &path)?;
            println!("wrote {} trajectories to {}", d.len(), path.display());
        }
        Command::TrainPolicies => {
            let suite = suite(&cfg)?;
            let dir = out.join("policies");
            fs::create_dir_all(&dir)?;
            for p in suite.candidates.iter().chain([&suite.behavior]) {
                fs::write(dir.join(format!("{}.json", p.id)), serde_json::to_string(p)?)?;
            }
            let manifest = Manifest { candidates: suite.candidate_ids(), behavior: suite.behavior.id.clone() };
            fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            let values = PolicyValues {
                gamma: cfg.env.gamma,
                horizon: cfg.env.horizon,
                discounted: suite.oracle.values.clone(),
                undiscounted: suite.oracle_undiscounted.values.clone(),
            };
            fs::write(out.join("policy_values.json"), serde_json::to_string(&values)?)?;
            println!("wrote {} candidates and the behavior policy to {}", suite.candidates.len(), dir.display());
        }
        Command::Partition { data, m } => {
            let d = load(&data)?;
            let fcfg = fps_config(&cfg, m);
            let (partition, m_scores) = partition_participants(&d.trajectories, &SepsisSpace, &fcfg)?;
            fs::create_dir_all(&out)?;
            let path = out.join("partition.json");
            fs::write(&path, serde_json::to_string_pretty(&PartitionFile { partition: partition.clone(), m_scores })?)?;
            for (k, c) in partition.clusters.iter().enumerate() {
                println!("subgroup {k}: {} participants", c.member_ids.len());
            }
            println!("wrote {}", path.display());
        }
        Command::Augment { data, m } => {
            let d = load(&data)?;
            let suite = suite(&cfg)?;
            let fcfg = fps_config(&cfg, m);
            let aug = fcfg.augment.clone().unwrap_or_default();
            let (partition, _) = partition_participants(&d.trajectories, &SepsisSpace, &fcfg)?;
            let by_id: BTreeMap<u64, &Trajectory> = d.trajectories.iter().map(|t| (t.participant_id, t)).collect();
            let models = out.join("models");
            fs::create_dir_all(&models)?;
            let mut synthetic = Vec::new();
            // Same id blocks and seeds as the selection stage.
            let mut next_id = d.max_participant_id() + 1;
            for (k, c) in partition.clusters.iter().enumerate() {
                let real: Vec<Trajectory> = c.member_ids.iter().map(|id| by_id[id].clone()).collect();
                let n = (real.len() as f64 * aug.ratio).round() as usize;
                let first = next_id;
                next_id += n as u64;
                if real.len() < fcfg.min_size || n == 0 {
                    println!("subgroup {k}: {} participants, not augmented", real.len());
                    continue;
                }
                let seed = derive_seed(fcfg.seed, &[2, k as u64]);
                let (model, synth) = augment_subgroup(&real, &suite.behavior, &SepsisSpace, &aug, n, first, seed)
                    .with_context(|| format!("augmenting subgroup {k}"))?;
                fs::write(models.join(format!("subgroup_{k}.json")), model.to_json())?;
                println!("subgroup {k}: {} participants, {} synthetic", real.len(), synth.len());
                synthetic.extend(synth);
            }
            let meta = DatasetMeta { seed: cfg.seed, ..d.meta.clone() };
            let path = out.join("synthetic.jsonl");
            save_dataset(&OfflineDataset::new(meta, synthetic)?, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Select { data, m, policies, no_augment } => {
            let d = load(&data)?;
            let (candidates, behavior) = match policies {
                Some(dir) => load_policies(&dir)?,
                None => {
                    let s = suite(&cfg)?;
                    (s.candidates, s.behavior)
                }
            };
            let mut fcfg = fps_config(&cfg, m);
            if no_augment {
                fcfg.augment = None;
            }
            let refs: Vec<&TabularPolicy> = candidates.iter().collect();
            let table = fps_train(&d.trajectories, &refs, &behavior, &SepsisSpace, &fcfg)?;
            fs::create_dir_all(&out)?;
            let path = out.join("table.json");
            fs::write(&path, table.to_json()?)?;
            for r in &table.rows {
                let flag = if r.small_subgroup { " (population fallback)" } else { "" };
                println!("subgroup {}: {} real, {} synthetic -> {}{flag}", r.subgroup, r.n_real, r.n_synthetic, r.best_policy);
            }
            println!("wrote {}", path.display());
        }
        Command::Deploy { table, state } => {
            if state >= N_STATES {
                bail!("state {state} is out of range 0..{N_STATES}");
            }
            let text = fs::read_to_string(&table).with_context(|| format!("reading {}", table.display()))?;
            let t = SelectionTable::from_json(&text)?;
            println!("{}", fps_deploy_state(state, &SepsisSpace, &t)?);
        }
        Command::Bench { sizes, runs, methods, rrs, discounted, arrivals } => {
            if let Some(s) = sizes {
                cfg.sizes = s;
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(r) = rrs {
                cfg.rrs = r;
            }
            if let Some(a) = arrivals {
                cfg.arrivals = a;
            }
            cfg.discounted |= discounted;
            let report = run_benchmark(&cfg)?;
            report.write(&out)?;
            print!("{}", report.table_text());
            let failed = report.failed_cells();
            if failed > 0 {
                for c in report.cells.iter().filter(|c| c.status != "ok") {
                    eprintln!("{} N={} run={}: {} {}", c.method, c.n, c.run, c.status, c.message.as_deref().unwrap_or(""));
                }
                eprintln!("{failed} cell(s) failed");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { input } => {
            let path = input.unwrap_or_else(|| out.join("report.json"));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let report = BenchReport::from_json(&text)?;
            print!("{}", report.table_text());
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ── Helpers ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    candidates: Vec<String>,
    behavior: String,
}

#[derive(Serialize)]
struct PolicyValues {
    gamma: f64,
    horizon: usize,
    /// Exact values per initial state index.
    discounted: BTreeMap<String, Vec<f64>>,
    undiscounted: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize)]
struct PartitionFile {
    partition: fps_core::subgroup::Partition,
    /// Mean silhouette per searched subgroup count.
    m_scores: Vec<(usize, Option<f64>)>,
}

fn suite(cfg: &BenchConfig) -> Result<SepsisSuite> {
    cfg.validate()?;
    Ok(SepsisSuite::build(&cfg.env, cfg.antibiotic_scope)?)
}

/// The selection stage's settings under the CLI's seed.
fn fps_config(cfg: &BenchConfig, m: Option<usize>) -> FpsConfig {
    FpsConfig { seed: cfg.seed, gamma: cfg.env.gamma, m: m.or(cfg.fps.m), ..cfg.fps.clone() }
}

fn load(path: &Path) -> Result<OfflineDataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn load_policies(dir: &Path) -> Result<(Vec<TabularPolicy>, TabularPolicy)> {
    let read = |id: &str| -> Result<TabularPolicy> {
        let path = dir.join(format!("{id}.json"));
        let p: TabularPolicy = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
        p.validate()?;
        Ok(p)
    };
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).context("reading the policy manifest")?)?;
    let candidates = manifest.candidates.iter().map(|id| read(id)).collect::<Result<Vec<_>>>()?;
    Ok((candidates, read(&manifest.behavior)?))
}
