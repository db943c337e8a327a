//! Core domain types: the factored sepsis state, treatment actions,
//! logged trajectories and the offline dataset with its JSONL format.
//!
//! States and actions are stored in trajectories by their canonical integer
//! index, so the same trajectory and estimator machinery also serves small
//! hand-built MDPs whose states are plain integers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of the sepsis state space: 3·3·2·5·2·2·2·2.
pub const N_STATES: usize = 1440;
/// Size of the sepsis action space: three binary treatments.
pub const N_ACTIONS: usize = 8;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("trajectory {0} has no steps")]
    EmptyTrajectory(u64),

    #[error("discount factor must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("duplicate participant id {0}")]
    DuplicateParticipant(u64),

    #[error("state index {0} out of range")]
    StateOutOfRange(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Vitals ──────────────────────────────────────────────────────────────

/// Three-level ordinal used by heart rate and blood pressure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tri {
    Low,
    Normal,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oxygen {
    Low,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glucose {
    VeryLow,
    Low,
    Normal,
    High,
    VeryHigh,
}

/// Ordinal vital sign with a fixed number of levels and one normal level.
pub trait Vital: Copy {
    const LEVELS: usize;
    const NORMAL: usize;
    fn level(self) -> usize;
    fn from_level(level: usize) -> Self;

    fn is_normal(self) -> bool {
        self.level() == Self::NORMAL
    }
}

impl Vital for Tri {
    const LEVELS: usize = 3;
    const NORMAL: usize = 1;
    fn level(self) -> usize {
        self as usize
    }
    fn from_level(level: usize) -> Self {
        match level {
            0 => Tri::Low,
            1 => Tri::Normal,
            2 => Tri::High,
            _ => panic!("three-level vital out of range: {level}"),
        }
    }
}

impl Vital for Oxygen {
    const LEVELS: usize = 2;
    const NORMAL: usize = 1;
    fn level(self) -> usize {
        self as usize
    }
    fn from_level(level: usize) -> Self {
        match level {
            0 => Oxygen::Low,
            1 => Oxygen::Normal,
            _ => panic!("oxygen level out of range: {level}"),
        }
    }
}

impl Vital for Glucose {
    const LEVELS: usize = 5;
    const NORMAL: usize = 2;
    fn level(self) -> usize {
        self as usize
    }
    fn from_level(level: usize) -> Self {
        match level {
            0 => Glucose::VeryLow,
            1 => Glucose::Low,
            2 => Glucose::Normal,
            3 => Glucose::High,
            4 => Glucose::VeryHigh,
            _ => panic!("glucose level out of range: {level}"),
        }
    }
}

// ── State and action ────────────────────────────────────────────────────

/// Factored patient state. The three treatment flags record which
/// treatments the previous action switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SepsisState {
    pub heart_rate: Tri,
    pub blood_pressure: Tri,
    pub oxygen: Oxygen,
    pub glucose: Glucose,
    pub diabetic: bool,
    pub abx_on: bool,
    pub vaso_on: bool,
    pub vent_on: bool,
}

impl SepsisState {
    /// All vitals normal, no diabetes, no treatment running.
    pub fn healthy() -> Self {
        SepsisState {
            heart_rate: Tri::Normal,
            blood_pressure: Tri::Normal,
            oxygen: Oxygen::Normal,
            glucose: Glucose::Normal,
            diabetic: false,
            abx_on: false,
            vaso_on: false,
            vent_on: false,
        }
    }

    /// Mixed-radix index with heart rate as the least significant digit:
    /// `hr + 3·(bp + 3·(o2 + 2·(glu + 5·(diab + 2·(abx + 2·(vaso + 2·vent))))))`.
    pub fn encode(&self) -> usize {
        let mut idx = self.vent_on as usize;
        idx = idx * 2 + self.vaso_on as usize;
        idx = idx * 2 + self.abx_on as usize;
        idx = idx * 2 + self.diabetic as usize;
        idx = idx * 5 + self.glucose.level();
        idx = idx * 2 + self.oxygen.level();
        idx = idx * 3 + self.blood_pressure.level();
        idx * 3 + self.heart_rate.level()
    }

    pub fn decode(index: usize) -> Result<Self, MdpError> {
        if index >= N_STATES {
            return Err(MdpError::StateOutOfRange(index));
        }
        let mut rest = index;
        let mut digit = |radix: usize| {
            let d = rest % radix;
            rest /= radix;
            d
        };
        Ok(SepsisState {
            heart_rate: Tri::from_level(digit(3)),
            blood_pressure: Tri::from_level(digit(3)),
            oxygen: Oxygen::from_level(digit(2)),
            glucose: Glucose::from_level(digit(5)),
            diabetic: digit(2) == 1,
            abx_on: digit(2) == 1,
            vaso_on: digit(2) == 1,
            vent_on: digit(2) == 1,
        })
    }

    /// Number of the four vitals outside their normal range.
    pub fn abnormal_vitals(&self) -> usize {
        [
            self.heart_rate.is_normal(),
            self.blood_pressure.is_normal(),
            self.oxygen.is_normal(),
            self.glucose.is_normal(),
        ]
        .iter()
        .filter(|n| !**n)
        .count()
    }

    pub fn any_treatment_on(&self) -> bool {
        self.abx_on || self.vaso_on || self.vent_on
    }

    pub fn with_treatment(mut self, action: TreatmentAction) -> Self {
        self.abx_on = action.antibiotics;
        self.vaso_on = action.vasopressors;
        self.vent_on = action.ventilation;
        self
    }
}

/// Convenience wrapper for [`SepsisState::encode`].
pub fn encode_state(s: &SepsisState) -> usize {
    s.encode()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TreatmentAction {
    pub antibiotics: bool,
    pub vasopressors: bool,
    pub ventilation: bool,
}

impl TreatmentAction {
    pub const NONE: TreatmentAction = TreatmentAction {
        antibiotics: false,
        vasopressors: false,
        ventilation: false,
    };

    /// `abx + 2·vaso + 4·vent`, matching the flag order of the state index.
    pub fn index(&self) -> usize {
        self.antibiotics as usize | (self.vasopressors as usize) << 1 | (self.ventilation as usize) << 2
    }

    pub fn from_index(index: usize) -> Self {
        debug_assert!(index < N_ACTIONS);
        TreatmentAction {
            antibiotics: index & 1 != 0,
            vasopressors: index & 2 != 0,
            ventilation: index & 4 != 0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.index() == 0
    }
}

/// Action index with the vasopressor bit toggled.
pub fn flip_vasopressor(action: usize) -> usize {
    action ^ 2
}

// ── Trajectories ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
}

/// One participant's logged episode.
///
/// `terminated_early` is set when the episode ended in an absorbing outcome
/// (discharge or death) rather than by running into the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "id")]
    pub participant_id: u64,
    pub steps: Vec<Step>,
    #[serde(rename = "terminal_s")]
    pub terminal_state: usize,
    #[serde(rename = "early")]
    pub terminated_early: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> usize {
        self.steps.first().map_or(self.terminal_state, |s| s.state)
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }
}

/// `γ^0, γ^1, …, γ^(len-1)` as a running product.
pub fn discount_powers(gamma: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut d = 1.0;
    for _ in 0..len {
        out.push(d);
        d *= gamma;
    }
    out
}

/// `Σ_t γ^(t-1) r_t` without argument validation.
pub(crate) fn discounted_sum(traj: &Trajectory, gamma: f64) -> f64 {
    let mut d = 1.0;
    let mut g = 0.0;
    for step in &traj.steps {
        g += d * step.reward;
        d *= gamma;
    }
    g
}

pub fn discounted_return(traj: &Trajectory, gamma: f64) -> Result<f64, MdpError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(MdpError::InvalidGamma(gamma));
    }
    if traj.is_empty() {
        return Err(MdpError::EmptyTrajectory(traj.participant_id));
    }
    Ok(discounted_sum(traj, gamma))
}

// ── Dataset ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub gamma: f64,
    pub horizon: usize,
    #[serde(rename = "behavior")]
    pub behavior_policy_id: String,
    pub seed: u64,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            gamma: 0.99,
            horizon: 5,
            behavior_policy_id: String::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self, MdpError> {
        let ds = OfflineDataset { meta, trajectories };
        ds.check_unique_ids()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn max_participant_id(&self) -> u64 {
        self.trajectories.iter().map(|t| t.participant_id).max().unwrap_or(0)
    }

    fn check_unique_ids(&self) -> Result<(), MdpError> {
        let mut seen = HashSet::with_capacity(self.trajectories.len());
        for t in &self.trajectories {
            if !seen.insert(t.participant_id) {
                return Err(MdpError::DuplicateParticipant(t.participant_id));
            }
        }
        Ok(())
    }

    /// Writes the header line followed by one trajectory per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), MdpError> {
        let header = MetaLine { meta: self.meta.clone() };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, MdpError> {
        let mut meta = None;
        let mut trajectories = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| MdpError::Malformed {
                line: line_no,
                msg: e.to_string(),
            })?;
            if value.get("meta").is_some() {
                if meta.is_some() || !trajectories.is_empty() {
                    return Err(MdpError::Malformed {
                        line: line_no,
                        msg: "header must be the first record".into(),
                    });
                }
                let m: MetaLine = serde_json::from_value(value).map_err(|e| MdpError::Malformed {
                    line: line_no,
                    msg: e.to_string(),
                })?;
                meta = Some(m.meta);
                continue;
            }
            let t: Trajectory = serde_json::from_value(value).map_err(|e| MdpError::Malformed {
                line: line_no,
                msg: e.to_string(),
            })?;
            validate_record(&t).map_err(|msg| MdpError::Malformed { line: line_no, msg })?;
            if !seen.insert(t.participant_id) {
                return Err(MdpError::DuplicateParticipant(t.participant_id));
            }
            trajectories.push(t);
        }
        Ok(OfflineDataset {
            meta: meta.unwrap_or_default(),
            trajectories,
        })
    }
}

fn validate_record(t: &Trajectory) -> Result<(), String> {
    if t.steps.is_empty() {
        return Err(format!("trajectory {} has no steps", t.participant_id));
    }
    for (k, s) in t.steps.iter().enumerate() {
        if s.state >= N_STATES {
            return Err(format!("step {k}: state {} out of range", s.state));
        }
        if s.action >= N_ACTIONS {
            return Err(format!("step {k}: action {} out of range", s.action));
        }
        if !s.reward.is_finite() {
            return Err(format!("step {k}: non-finite reward"));
        }
    }
    if t.terminal_state >= N_STATES {
        return Err(format!("terminal state {} out of range", t.terminal_state));
    }
    Ok(())
}

pub fn save_dataset(d: &OfflineDataset, path: impl AsRef<Path>) -> Result<(), MdpError> {
    let mut w = BufWriter::new(File::create(path)?);
    d.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset, MdpError> {
    OfflineDataset::read_jsonl(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: u64, rewards: &[f64]) -> Trajectory {
        Trajectory {
            participant_id: id,
            steps: rewards
                .iter()
                .enumerate()
                .map(|(k, &r)| Step { state: k, action: k % 8, reward: r })
                .collect(),
            terminal_state: 7,
            terminated_early: false,
            synthetic: false,
        }
    }

    #[test]
    fn encode_edge_indices() {
        let lowest = SepsisState {
            heart_rate: Tri::Low,
            blood_pressure: Tri::Low,
            oxygen: Oxygen::Low,
            glucose: Glucose::VeryLow,
            diabetic: false,
            abx_on: false,
            vaso_on: false,
            vent_on: false,
        };
        assert_eq!(lowest.encode(), 0);
        assert_eq!(SepsisState { heart_rate: Tri::Normal, ..lowest }.encode(), 1);
        let highest = SepsisState {
            heart_rate: Tri::High,
            blood_pressure: Tri::High,
            oxygen: Oxygen::Normal,
            glucose: Glucose::VeryHigh,
            diabetic: true,
            abx_on: true,
            vaso_on: true,
            vent_on: true,
        };
        assert_eq!(highest.encode(), 3 * 3 * 2 * 5 * 2 * 2 * 2 * 2 - 1);
    }

    #[test]
    fn encode_decode_is_a_bijection() {
        let mut seen = HashSet::new();
        for i in 0..N_STATES {
            let s = SepsisState::decode(i).unwrap();
            assert_eq!(s.encode(), i);
            assert!(seen.insert(s));
        }
        assert!(SepsisState::decode(N_STATES).is_err());
    }

    #[test]
    fn action_index_roundtrip() {
        for a in 0..N_ACTIONS {
            assert_eq!(TreatmentAction::from_index(a).index(), a);
            assert_eq!(flip_vasopressor(flip_vasopressor(a)), a);
        }
        let abx = TreatmentAction { antibiotics: true, ..TreatmentAction::NONE };
        assert_eq!(abx.index(), 1);
        assert_eq!(flip_vasopressor(1), 3);
    }

    #[test]
    fn returns_from_definition() {
        assert_eq!(discounted_return(&traj(1, &[0.0; 5]), 0.99).unwrap(), 0.0);
        let g = discounted_return(&traj(1, &[0.0, 0.0, 0.0, 0.0, 1.0]), 0.99).unwrap();
        assert!((g - 0.96059601).abs() < 1e-12);
        assert_eq!(discounted_return(&traj(1, &[1.0, 1.0]), 1.0).unwrap(), 2.0);
        assert!(matches!(
            discounted_return(&traj(1, &[]), 0.9),
            Err(MdpError::EmptyTrajectory(1))
        ));
        assert!(discounted_return(&traj(1, &[1.0]), 0.0).is_err());
        assert!(discounted_return(&traj(1, &[1.0]), 1.5).is_err());
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds = OfflineDataset::read_jsonl("".as_bytes()).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"id":1,"steps":[{"s":0,"a":0,"r":0.0}],"terminal_s":0,"early":false}
{"id":1,"steps":[{"s":0,"a":0,"r":0.0}],"terminal_s":0,"early":false}
"#;
        assert!(matches!(
            OfflineDataset::read_jsonl(text.as_bytes()),
            Err(MdpError::DuplicateParticipant(1))
        ));
        assert!(OfflineDataset::new(DatasetMeta::default(), vec![traj(3, &[0.0]), traj(3, &[1.0])]).is_err());
    }

    #[test]
    fn malformed_record_names_line() {
        let text = "{\"meta\":{\"gamma\":0.99,\"horizon\":5,\"behavior\":\"b\",\"seed\":1}}\n\
                    {\"id\":1,\"steps\":[{\"s\":0,\"a\":0,\"r\":0.0}],\"terminal_s\":0,\"early\":false}\n\
                    {\"id\":2,\"steps\":[{\"s\":5000,\"a\":0,\"r\":0.0}],\"terminal_s\":0,\"early\":false}\n";
        match OfflineDataset::read_jsonl(text.as_bytes()) {
            Err(MdpError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
        match OfflineDataset::read_jsonl("{not json\n".as_bytes()) {
            Err(MdpError::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn record_format_is_stable() {
        let t = Trajectory {
            participant_id: 4,
            steps: vec![Step { state: 12, action: 3, reward: 0.0 }, Step { state: 13, action: 0, reward: 1.0 }],
            terminal_state: 14,
            terminated_early: true,
            synthetic: false,
        };
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(
            line,
            r#"{"id":4,"steps":[{"s":12,"a":3,"r":0.0},{"s":13,"a":0,"r":1.0}],"terminal_s":14,"early":true}"#
        );
        let synth = Trajectory { synthetic: true, ..t };
        assert!(serde_json::to_string(&synth).unwrap().ends_with(r#""synthetic":true}"#));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_traj() -> impl Strategy<Value = Trajectory> {
            (
                prop::collection::vec((0usize..N_STATES, 0usize..N_ACTIONS, -1i8..=1), 1..6),
                0usize..N_STATES,
                any::<bool>(),
                any::<bool>(),
            )
                .prop_map(|(steps, term, early, synthetic)| Trajectory {
                    participant_id: 0,
                    steps: steps
                        .into_iter()
                        .map(|(s, a, r)| Step { state: s, action: a, reward: r as f64 })
                        .collect(),
                    terminal_state: term,
                    terminated_early: early,
                    synthetic,
                })
        }

        proptest! {
            #[test]
            fn jsonl_roundtrip(mut trajs in prop::collection::vec(arb_traj(), 0..20), gamma in 0.01f64..=1.0, seed: u64) {
                for (i, t) in trajs.iter_mut().enumerate() {
                    t.participant_id = i as u64 + 1;
                }
                let ds = OfflineDataset::new(
                    DatasetMeta { gamma, horizon: 5, behavior_policy_id: "beta".into(), seed },
                    trajs,
                ).unwrap();
                let mut first = Vec::new();
                ds.write_jsonl(&mut first).unwrap();
                let back = OfflineDataset::read_jsonl(first.as_slice()).unwrap();
                prop_assert_eq!(&back, &ds);
                let mut second = Vec::new();
                back.write_jsonl(&mut second).unwrap();
                prop_assert_eq!(first, second);
            }

            #[test]
            fn return_is_linear_in_rewards(r1 in prop::collection::vec(-2.0f64..2.0, 1..6), scale in -3.0f64..3.0, gamma in 0.01f64..=1.0) {
                let t1 = traj(1, &r1);
                let scaled: Vec<f64> = r1.iter().map(|r| r * scale).collect();
                let t2 = traj(1, &scaled);
                let g1 = discounted_return(&t1, gamma).unwrap();
                let g2 = discounted_return(&t2, gamma).unwrap();
                prop_assert!((g2 - scale * g1).abs() < 1e-9);
            }

            #[test]
            fn return_monotone_in_gamma_for_nonnegative_rewards(r in prop::collection::vec(0.0f64..2.0, 1..6), g1 in 0.01f64..=1.0, g2 in 0.01f64..=1.0) {
                let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
                let t = traj(1, &r);
                prop_assert!(discounted_return(&t, lo).unwrap() <= discounted_return(&t, hi).unwrap() + 1e-12);
            }
        }
    }
}
