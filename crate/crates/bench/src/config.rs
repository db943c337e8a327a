//! Benchmark configuration.

use std::fmt;

use fps_core::fps::{AugmentConfig, FpsConfig};
use fps_core::policy::AntibioticScope;
use fps_core::sepsis::SepsisDynamicsConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fps,
    FpsNota,
    FpsP,
    Wis,
    Pdis,
    Fqe,
    Wdr,
    Magic,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fps => "fps",
            Method::FpsNota => "fps-nota",
            Method::FpsP => "fps-p",
            Method::Wis => "wis",
            Method::Pdis => "pdis",
            Method::Fqe => "fqe",
            Method::Wdr => "wdr",
            Method::Magic => "magic",
        }
    }

    pub fn is_fps(self) -> bool {
        matches!(self, Method::Fps | Method::FpsNota | Method::FpsP)
    }

    /// The default sweep: FPS and the five estimator baselines.
    pub fn table_set() -> Vec<Method> {
        vec![Method::Fps, Method::Wis, Method::Pdis, Method::Fqe, Method::Wdr, Method::Magic]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resampling wrapper applied to the estimator baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RrsMode {
    #[default]
    Off,
    Rrs,
    Vrrs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub methods: Vec<Method>,
    pub rrs: RrsMode,
    pub rrs_reps: usize,
    /// Base seed; every (size, run) cell derives its own streams from it.
    pub seed: u64,
    /// Fresh admissions each method's selections are deployed to.
    pub arrivals: usize,
    /// Report discounted returns instead of undiscounted outcomes.
    pub discounted: bool,
    pub env: SepsisDynamicsConfig,
    pub antibiotic_scope: AntibioticScope,
    pub fps: FpsConfig,
    /// Generator settings for VRRS.
    pub augment: AugmentConfig,
    pub magic_bootstrap: usize,
    pub output: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![2500, 5000, 10000],
            runs: 10,
            methods: Method::table_set(),
            rrs: RrsMode::Off,
            rrs_reps: fps_core::ope::RRS_REPS,
            seed: 0,
            arrivals: 1000,
            discounted: false,
            env: SepsisDynamicsConfig::default(),
            antibiotic_scope: AntibioticScope::Admission,
            fps: FpsConfig::default(),
            augment: AugmentConfig::default(),
            magic_bootstrap: 200,
            output: "out".into(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.runs == 0 {
            return bad("runs must be ≥ 1");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be nonempty and ≥ 1");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.arrivals == 0 {
            return bad("arrival cohort must be nonempty");
        }
        if self.rrs != RrsMode::Off && self.rrs_reps == 0 {
            return bad("resampling needs at least one repetition");
        }
        self.env.validate()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Builds a config from the defaults, overlaid with optional JSON text
    /// (which may set any subset of fields, at any depth) and then with
    /// `path=value` overrides. `path` is dot-separated (`env.gamma=0.95`);
    /// `value` is JSON, or a bare string when it does not parse as JSON.
    /// Override paths naming unknown fields are rejected.
    pub fn with_overrides(json: Option<&str>, overrides: &[String]) -> Result<Self, BenchError> {
        let mut value = serde_json::to_value(BenchConfig::default())?;
        if let Some(text) = json {
            merge(&mut value, serde_json::from_str(text)?);
        }
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| BenchError::Config(format!("override `{o}` is not path=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            set_path(&mut value, path, v)?;
        }
        let config: BenchConfig = serde_json::from_value(value)?;
        check_known(&serde_json::to_value(&config)?, overrides)?;
        Ok(config)
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Report label: baselines carry their resampling mode.
    pub fn label(&self, m: Method) -> String {
        match (m.is_fps(), self.rrs) {
            (true, _) | (_, RrsMode::Off) => m.name().into(),
            (false, RrsMode::Rrs) => format!("{}+rrs", m.name()),
            (false, RrsMode::Vrrs) => format!("{}+vrrs", m.name()),
        }
    }
}

fn set_path(root: &mut serde_json::Value, path: &str, v: serde_json::Value) -> Result<(), BenchError> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = match cur {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => {
                *cur = serde_json::Value::Object(Default::default());
                cur.as_object_mut().expect("just created")
            }
            _ => return Err(BenchError::Config(format!("`{path}`: `{k}` is not inside an object"))),
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert(serde_json::Value::Null);
    }
    Ok(())
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Rejects overrides naming fields the config does not have; serde would
/// otherwise drop them silently.
fn check_known(config: &serde_json::Value, overrides: &[String]) -> Result<(), BenchError> {
    for o in overrides {
        let path = o.split_once('=').map_or(o.as_str(), |(p, _)| p);
        let mut cur = config;
        for k in path.split('.') {
            match cur.get(k) {
                Some(next) => cur = next,
                // An optional section left unset may legitimately be absent.
                None if cur.is_null() => break,
                None => return Err(BenchError::Config(format!("unknown config field `{path}`"))),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = BenchConfig::default();
        c.validate().unwrap();
        let back = BenchConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash(), back.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = BenchConfig::from_json(r#"{"sizes":[100],"runs":1,"methods":["fps","fps-nota"]}"#).unwrap();
        assert_eq!(c.sizes, vec![100]);
        assert_eq!(c.methods, vec![Method::Fps, Method::FpsNota]);
        assert_eq!(c.arrivals, 1000);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            BenchConfig { runs: 0, ..Default::default() },
            BenchConfig { sizes: vec![], ..Default::default() },
            BenchConfig { sizes: vec![0], ..Default::default() },
            BenchConfig { methods: vec![], ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = vec!["env.gamma=0.95".to_string(), "runs=3".to_string(), "rrs=vrrs".to_string(), "fps.m=4".to_string()];
        let c = BenchConfig::with_overrides(None, &sets).unwrap();
        assert_eq!(c.env.gamma, 0.95);
        assert_eq!(c.runs, 3);
        assert_eq!(c.rrs, RrsMode::Vrrs);
        assert_eq!(c.fps.m, Some(4));
        let c = BenchConfig::with_overrides(Some(r#"{"sizes":[100]}"#), &["seed=9".into()]).unwrap();
        assert_eq!((c.sizes.clone(), c.seed, c.runs), (vec![100], 9, 10));
        assert!(BenchConfig::with_overrides(None, &["nope=1".into()]).is_err());
        assert!(BenchConfig::with_overrides(None, &["env.nope=1".into()]).is_err());
        assert!(BenchConfig::with_overrides(None, &["runs".into()]).is_err());
        let c = BenchConfig::with_overrides(Some(r#"{"env":{"gamma":0.9}}"#), &[]).unwrap();
        assert_eq!(c.env.gamma, 0.9);
        assert_eq!(c.env.horizon, BenchConfig::default().env.horizon);
    }

    #[test]
    fn labels() {
        let c = BenchConfig { rrs: RrsMode::Vrrs, ..Default::default() };
        assert_eq!(c.label(Method::Wis), "wis+vrrs");
        assert_eq!(c.label(Method::Fps), "fps");
    }
}
