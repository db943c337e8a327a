//! Reproducible benchmark harness for first-glance policy selection on the
//! simulated sepsis task: dataset generation, the method sweep, metrics,
//! multi-run aggregation and report files.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod suite;

pub use config::{BenchConfig, Method, RrsMode};
pub use metrics::{mean_se, metric_ae, metric_mae, metric_regret1, MeanSe};
pub use report::{BenchReport, ReportRow};
pub use run::run_benchmark;
pub use suite::{Oracle, SepsisSuite};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("no oracle value for policy {policy} at state {state}")]
    MissingOracle { policy: String, state: usize },

    #[error("{0} needs at least one value")]
    Empty(&'static str),

    #[error("environment: {0}")]
    Env(#[from] fps_core::sepsis::EnvError),

    #[error("policy construction: {0}")]
    Policy(#[from] fps_core::policy::PolicyError),

    #[error("model: {0}")]
    Model(#[from] fps_core::model::ModelError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
