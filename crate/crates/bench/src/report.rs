//! Aggregation across runs and the report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::metrics::{mean_se, MeanSe};
use crate::run::{Cell, CellMetrics};
use crate::BenchError;

pub const CSV_HEADER: &str = "method,N,metric,mean,se,runs,seed0";

/// Metrics in report order.
pub const METRICS: [&str; 3] = ["ae", "return", "regret_at_1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub commit: String,
}

impl Provenance {
    /// The commit comes from `FPS_COMMIT`, else from `git rev-parse HEAD`,
    /// else `unknown`.
    pub fn new(config: &BenchConfig) -> Self {
        let commit = std::env::var("FPS_COMMIT").ok().or_else(git_head).unwrap_or_else(|| "unknown".into());
        Provenance { seed: config.seed, config_hash: config.hash(), commit }
    }
}

fn git_head() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub n: usize,
    pub runs: usize,
    pub ae: Option<MeanSe>,
    /// Undiscounted or discounted per the config flag.
    #[serde(rename = "return")]
    pub ret: Option<MeanSe>,
    pub regret_at_1: Option<MeanSe>,
    pub mae: Option<MeanSe>,
    pub return_discounted: Option<MeanSe>,
    pub return_undiscounted: Option<MeanSe>,
    /// First failing stage, `error:<stage>`, when any run failed.
    pub error: Option<String>,
}

impl ReportRow {
    fn metric(&self, name: &str) -> Option<MeanSe> {
        match name {
            "ae" => self.ae,
            "return" => self.ret,
            "regret_at_1" => self.regret_at_1,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub provenance: Provenance,
    pub config: BenchConfig,
    pub rows: Vec<ReportRow>,
    pub cells: Vec<Cell>,
}

impl BenchReport {
    pub fn assemble(config: &BenchConfig, provenance: Provenance, cells: Vec<Cell>) -> Self {
        let mut rows = Vec::new();
        for &n in &config.sizes {
            for &m in &config.methods {
                let label = config.label(m);
                let mine: Vec<&Cell> = cells.iter().filter(|c| c.n == n && c.method == label).collect();
                let error = mine.iter().find(|c| c.status != "ok").map(|c| c.status.clone());
                let ok: Vec<&CellMetrics> = mine.iter().filter_map(|c| c.metrics.as_ref()).collect();
                let agg = |f: &dyn Fn(&CellMetrics) -> f64| -> Option<MeanSe> {
                    if error.is_some() {
                        return None;
                    }
                    mean_se(&ok.iter().map(|c| f(c)).collect::<Vec<_>>()).ok()
                };
                let discounted = config.discounted;
                rows.push(ReportRow {
                    method: label.clone(),
                    n,
                    runs: mine.len(),
                    ae: agg(&|c| c.ae),
                    ret: agg(&|c| if discounted { c.return_discounted } else { c.return_undiscounted }),
                    regret_at_1: agg(&|c| if discounted { c.regret_discounted } else { c.regret_undiscounted }),
                    mae: agg(&|c| c.mae),
                    return_discounted: agg(&|c| c.return_discounted),
                    return_undiscounted: agg(&|c| c.return_undiscounted),
                    error,
                });
            }
        }
        BenchReport { provenance, config: config.clone(), rows, cells }
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.status != "ok").count()
    }

    pub fn row(&self, method: &str, n: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.n == n)
    }

    /// One line per (method, N, metric); failed rows carry `error:<stage>`
    /// in the mean column and an empty standard error.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            for name in METRICS {
                let (mean, se) = match (&r.error, r.metric(name)) {
                    (Some(e), _) => (e.clone(), String::new()),
                    (None, Some(m)) => (m.mean.to_string(), m.se.to_string()),
                    (None, None) => ("error:aggregate".into(), String::new()),
                };
                writeln!(s, "{},{},{},{},{},{},{}", r.method, r.n, name, mean, se, r.runs, self.provenance.seed).unwrap();
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Gnuplot-ready series, one file per metric: `N` then `mean se` per
    /// method.
    pub fn dat_files(&self) -> Vec<(String, String)> {
        let methods: Vec<String> = self.config.methods.iter().map(|&m| self.config.label(m)).collect();
        METRICS
            .iter()
            .map(|name| {
                let mut s = String::from("# N");
                for m in &methods {
                    write!(s, " {m}_mean {m}_se").unwrap();
                }
                s.push('\n');
                for &n in &self.config.sizes {
                    write!(s, "{n}").unwrap();
                    for m in &methods {
                        match self.row(m, n).and_then(|r| r.metric(name)) {
                            Some(v) => write!(s, " {} {}", v.mean, v.se).unwrap(),
                            None => s.push_str(" NaN NaN"),
                        }
                    }
                    s.push('\n');
                }
                (format!("{name}.dat"), s)
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), BenchError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), self.to_json())?;
        for (name, body) in self.dat_files() {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    /// Methods as columns, (N, metric) as rows.
    pub fn table_text(&self) -> String {
        let methods: Vec<String> = self.config.methods.iter().map(|&m| self.config.label(m)).collect();
        let mut s = format!("{:<8} {:<12}", "N", "metric");
        for m in &methods {
            write!(s, " {m:>18}").unwrap();
        }
        s.push('\n');
        for &n in &self.config.sizes {
            for name in METRICS {
                write!(s, "{n:<8} {name:<12}").unwrap();
                for m in &methods {
                    let cell = match self.row(m, n) {
                        Some(ReportRow { error: Some(e), .. }) => e.clone(),
                        Some(r) => r.metric(name).map_or("-".into(), |v| format!("{:.3}±{:.3}", v.mean, v.se)),
                        None => "-".into(),
                    };
                    write!(s, " {cell:>18}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use std::collections::BTreeMap;

    fn cell(method: &str, run: usize, v: f64) -> Cell {
        Cell {
            method: method.into(),
            n: 10,
            run,
            seed: 0,
            status: "ok".into(),
            message: None,
            metrics: Some(CellMetrics {
                ae: v,
                mae: v,
                return_discounted: v,
                return_undiscounted: 2.0 * v,
                regret_discounted: v,
                regret_undiscounted: v,
                deployed: BTreeMap::new(),
            }),
        }
    }

    fn config() -> BenchConfig {
        BenchConfig { sizes: vec![10], runs: 3, methods: vec![Method::Fps, Method::Wis], ..Default::default() }
    }

    fn prov() -> Provenance {
        Provenance { seed: 7, config_hash: "h".into(), commit: "c".into() }
    }

    #[test]
    fn aggregation_and_csv() {
        let cells = vec![cell("fps", 0, 1.0), cell("fps", 1, 2.0), cell("fps", 2, 3.0), cell("wis", 0, 1.0), cell("wis", 1, 1.0), cell("wis", 2, 1.0)];
        let r = BenchReport::assemble(&config(), prov(), cells);
        let fps = r.row("fps", 10).unwrap();
        assert_eq!(fps.ae.unwrap().mean, 2.0);
        assert!((fps.ae.unwrap().se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(fps.ret.unwrap().mean, 4.0);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[4], "wis,10,ae,1,0,3,7");
        assert_eq!(r.dat_files().len(), 3);
    }

    #[test]
    fn failed_cells_are_isolated() {
        let mut bad = cell("wis", 1, 1.0);
        bad.status = "error:estimate".into();
        bad.metrics = None;
        let cells = vec![cell("fps", 0, 1.0), cell("fps", 1, 2.0), cell("fps", 2, 3.0), cell("wis", 0, 1.0), bad, cell("wis", 2, 1.0)];
        let r = BenchReport::assemble(&config(), prov(), cells);
        assert_eq!(r.failed_cells(), 1);
        assert!(r.row("fps", 10).unwrap().error.is_none());
        assert_eq!(r.row("wis", 10).unwrap().error.as_deref(), Some("error:estimate"));
        assert!(r.to_csv().contains("wis,10,ae,error:estimate,,3,7"));
    }
}
