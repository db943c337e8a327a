//! Simulated sepsis-treatment environment.
//!
//! Every vital evolves independently given the current state, the chosen
//! action and the hidden comorbidity flag. Each vital's next-level
//! distribution is built by composing small stochastic kernels in a fixed
//! order: treatment effects, withdrawal rebounds, then natural drift. The
//! simulator samples from these marginals and [`SepsisEnv::exact_model`]
//! multiplies them out, so both views share one definition of the dynamics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{
    DatasetMeta, Glucose, MdpError, OfflineDataset, Oxygen, SepsisState, Step, TreatmentAction, Trajectory, Tri, Vital,
    N_ACTIONS, N_STATES,
};
use crate::model::{sample_index, Branch, BranchedModel, ModelError, Outcome, TabularMdp};
use crate::policy::TabularPolicy;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("dataset size must be at least 1")]
    EmptyDataset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("policy {0} does not cover the sepsis state/action space")]
    PolicyShape(String),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Mdp(#[from] MdpError),
}

// ── Configuration ───────────────────────────────────────────────────────

/// Probability that an untreated (or treated) vital takes a random ±1 step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub untreated: f64,
    pub treated: f64,
}

/// Independent per-vital admission marginals plus diabetic prevalence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionDistribution {
    pub heart_rate: [f64; 3],
    pub blood_pressure: [f64; 3],
    pub oxygen: [f64; 2],
    pub glucose: [f64; 5],
    pub diabetic: f64,
}

impl AdmissionDistribution {
    /// Point mass on the all-normal, non-diabetic state.
    pub fn all_normal() -> Self {
        AdmissionDistribution {
            heart_rate: [0.0, 1.0, 0.0],
            blood_pressure: [0.0, 1.0, 0.0],
            oxygen: [0.0, 1.0],
            glucose: [0.0, 0.0, 1.0, 0.0, 0.0],
            diabetic: 0.0,
        }
    }

    /// Probability of admitting in `s` (zero unless all treatment flags are off).
    pub fn prob(&self, s: &SepsisState) -> f64 {
        if s.any_treatment_on() {
            return 0.0;
        }
        let diab = if s.diabetic { self.diabetic } else { 1.0 - self.diabetic };
        self.heart_rate[s.heart_rate.level()]
            * self.blood_pressure[s.blood_pressure.level()]
            * self.oxygen[s.oxygen.level()]
            * self.glucose[s.glucose.level()]
            * diab
    }

    fn validate(&self, name: &str) -> Result<(), EnvError> {
        let groups: [&[f64]; 4] = [&self.heart_rate, &self.blood_pressure, &self.oxygen, &self.glucose];
        for g in groups {
            check_distribution(g, name)?;
        }
        check_prob(self.diabetic, name)
    }
}

/// Every constant of the simulator. Field defaults follow the public
/// structure of the reference sepsis simulator; values are not calibrated
/// against any published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SepsisDynamicsConfig {
    /// Antibiotics: heart rate high → normal.
    pub abx_heart_rate: f64,
    /// Antibiotics: blood pressure high → normal.
    pub abx_blood_pressure: f64,
    /// Antibiotics switched off: heart rate normal → high.
    pub abx_withdrawal_heart_rate: f64,
    /// Antibiotics switched off: blood pressure normal → high.
    pub abx_withdrawal_blood_pressure: f64,
    /// Vasopressors: blood pressure up one level (non-diabetic).
    pub vaso_blood_pressure: f64,
    /// Vasopressors: blood pressure up one level (diabetic).
    pub vaso_blood_pressure_diabetic: f64,
    /// Vasopressors: glucose up one level (diabetic only).
    pub vaso_glucose_diabetic: f64,
    /// Vasopressors switched off: blood pressure down one level.
    pub vaso_withdrawal_blood_pressure: f64,
    /// Ventilation: oxygen low → normal.
    pub vent_oxygen: f64,
    /// Ventilation switched off: oxygen normal → low.
    pub vent_withdrawal_oxygen: f64,
    pub heart_rate_drift: Drift,
    pub blood_pressure_drift: Drift,
    pub oxygen_drift: Drift,
    pub glucose_drift: Drift,
    pub glucose_drift_diabetic: Drift,
    /// Untreated abnormal vital moves one level toward normal.
    pub spontaneous_recovery: f64,
    /// Prevalence of the hidden comorbidity.
    pub comorbidity_prevalence: f64,
    /// Multiplier on antibiotic success for comorbid patients.
    pub comorbidity_abx_factor: f64,
    /// Admission distribution of patients without the comorbidity.
    pub admission: AdmissionDistribution,
    /// Admission distribution of comorbid patients; `None` means the same
    /// as `admission` (comorbidity then carries no signal at admission).
    pub comorbid_admission: Option<AdmissionDistribution>,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for SepsisDynamicsConfig {
    fn default() -> Self {
        SepsisDynamicsConfig {
            abx_heart_rate: 0.5,
            abx_blood_pressure: 0.5,
            abx_withdrawal_heart_rate: 0.1,
            abx_withdrawal_blood_pressure: 0.1,
            vaso_blood_pressure: 0.7,
            vaso_blood_pressure_diabetic: 0.5,
            vaso_glucose_diabetic: 0.5,
            vaso_withdrawal_blood_pressure: 0.1,
            vent_oxygen: 0.7,
            vent_withdrawal_oxygen: 0.1,
            heart_rate_drift: Drift { untreated: 0.1, treated: 0.0 },
            blood_pressure_drift: Drift { untreated: 0.1, treated: 0.0 },
            oxygen_drift: Drift { untreated: 0.1, treated: 0.0 },
            glucose_drift: Drift { untreated: 0.1, treated: 0.1 },
            glucose_drift_diabetic: Drift { untreated: 0.3, treated: 0.3 },
            spontaneous_recovery: 0.05,
            comorbidity_prevalence: 0.2,
            comorbidity_abx_factor: 0.4,
            admission: AdmissionDistribution {
                heart_rate: [0.1, 0.4, 0.5],
                blood_pressure: [0.3, 0.4, 0.3],
                oxygen: [0.4, 0.6],
                glucose: [0.05, 0.15, 0.6, 0.15, 0.05],
                diabetic: 0.2,
            },
            comorbid_admission: None,
            horizon: 5,
            gamma: 0.99,
        }
    }
}

fn check_prob(p: f64, what: &str) -> Result<(), EnvError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EnvError::InvalidConfig(format!("{what}: probability {p} outside [0, 1]")))
    }
}

fn check_distribution(d: &[f64], what: &str) -> Result<(), EnvError> {
    for p in d {
        check_prob(*p, what)?;
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(EnvError::InvalidConfig(format!("{what}: marginal sums to {s}")));
    }
    Ok(())
}

impl SepsisDynamicsConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let probs = [
            ("abx_heart_rate", self.abx_heart_rate),
            ("abx_blood_pressure", self.abx_blood_pressure),
            ("abx_withdrawal_heart_rate", self.abx_withdrawal_heart_rate),
            ("abx_withdrawal_blood_pressure", self.abx_withdrawal_blood_pressure),
            ("vaso_blood_pressure", self.vaso_blood_pressure),
            ("vaso_blood_pressure_diabetic", self.vaso_blood_pressure_diabetic),
            ("vaso_glucose_diabetic", self.vaso_glucose_diabetic),
            ("vaso_withdrawal_blood_pressure", self.vaso_withdrawal_blood_pressure),
            ("vent_oxygen", self.vent_oxygen),
            ("vent_withdrawal_oxygen", self.vent_withdrawal_oxygen),
            ("spontaneous_recovery", self.spontaneous_recovery),
            ("comorbidity_prevalence", self.comorbidity_prevalence),
            ("comorbidity_abx_factor", self.comorbidity_abx_factor),
        ];
        for (name, p) in probs {
            check_prob(p, name)?;
        }
        for (name, d) in [
            ("heart_rate_drift", self.heart_rate_drift),
            ("blood_pressure_drift", self.blood_pressure_drift),
            ("oxygen_drift", self.oxygen_drift),
            ("glucose_drift", self.glucose_drift),
            ("glucose_drift_diabetic", self.glucose_drift_diabetic),
        ] {
            check_prob(d.untreated, name)?;
            check_prob(d.treated, name)?;
        }
        if self.spontaneous_recovery + self.heart_rate_drift.untreated.max(self.blood_pressure_drift.untreated) > 1.0 {
            return Err(EnvError::InvalidConfig("recovery plus drift exceeds 1".into()));
        }
        self.admission.validate("admission")?;
        if let Some(c) = &self.comorbid_admission {
            c.validate("comorbid_admission")?;
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Every transition and effect probability zero: vitals never change.
    pub fn frozen() -> Self {
        let still = Drift { untreated: 0.0, treated: 0.0 };
        SepsisDynamicsConfig {
            abx_heart_rate: 0.0,
            abx_blood_pressure: 0.0,
            abx_withdrawal_heart_rate: 0.0,
            abx_withdrawal_blood_pressure: 0.0,
            vaso_blood_pressure: 0.0,
            vaso_blood_pressure_diabetic: 0.0,
            vaso_glucose_diabetic: 0.0,
            vaso_withdrawal_blood_pressure: 0.0,
            vent_oxygen: 0.0,
            vent_withdrawal_oxygen: 0.0,
            heart_rate_drift: still,
            blood_pressure_drift: still,
            oxygen_drift: still,
            glucose_drift: still,
            glucose_drift_diabetic: still,
            spontaneous_recovery: 0.0,
            ..SepsisDynamicsConfig::default()
        }
    }

    fn comorbid_admission(&self) -> &AdmissionDistribution {
        self.comorbid_admission.as_ref().unwrap_or(&self.admission)
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// Hidden per-admission context. Never written into states or trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PatientContext {
    pub comorbid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    None,
    Discharged,
    Deceased,
}

impl Terminal {
    pub fn reward(self) -> f64 {
        match self {
            Terminal::None => 0.0,
            Terminal::Discharged => 1.0,
            Terminal::Deceased => -1.0,
        }
    }

    /// Death on three or more abnormal vitals; discharge when every vital is
    /// normal and no treatment was given.
    pub fn classify(next: &SepsisState, action: TreatmentAction) -> Self {
        if next.abnormal_vitals() >= 3 {
            Terminal::Deceased
        } else if next.abnormal_vitals() == 0 && action.is_none() {
            Terminal::Discharged
        } else {
            Terminal::None
        }
    }
}

fn point<const L: usize>(level: usize) -> [f64; L] {
    let mut d = [0.0; L];
    d[level] = 1.0;
    d
}

/// Moves mass `p` from level `from` to level `to`.
fn shift<const L: usize>(d: &mut [f64; L], from: usize, to: usize, p: f64) {
    let m = d[from] * p;
    d[from] -= m;
    d[to] += m;
}

/// Every level moves up one step with probability `p` (the top level stays).
fn step_up<const L: usize>(d: &mut [f64; L], p: f64) {
    for l in (0..L - 1).rev() {
        shift(d, l, l + 1, p);
    }
}

fn step_down<const L: usize>(d: &mut [f64; L], p: f64) {
    for l in 1..L {
        shift(d, l, l - 1, p);
    }
}

/// With probability `recovery` an abnormal level moves one step toward
/// normal; otherwise with probability `drift` it moves ±1 at random (the
/// move is dropped at the range boundary).
fn natural<const L: usize>(d: &[f64; L], normal: usize, recovery: f64, drift: f64) -> [f64; L] {
    let mut out = [0.0; L];
    for (l, &m) in d.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut stay = m;
        if l != normal && recovery > 0.0 {
            let toward = if l < normal { l + 1 } else { l - 1 };
            out[toward] += m * recovery;
            stay -= m * recovery;
        }
        let half = stay * drift / 2.0;
        if l > 0 {
            out[l - 1] += half;
            stay -= half;
        }
        if l + 1 < L {
            out[l + 1] += half;
            stay -= half;
        }
        out[l] += stay;
    }
    out
}

/// Independent next-level distributions of the four vitals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitalMarginals {
    pub heart_rate: [f64; 3],
    pub blood_pressure: [f64; 3],
    pub oxygen: [f64; 2],
    pub glucose: [f64; 5],
}

impl SepsisDynamicsConfig {
    pub fn marginals(&self, s: &SepsisState, ctx: PatientContext, a: TreatmentAction) -> VitalMarginals {
        let abx_scale = if ctx.comorbid { self.comorbidity_abx_factor } else { 1.0 };
        let (n3, n2, n5) = (Tri::NORMAL, Oxygen::NORMAL, Glucose::NORMAL);
        let high = Tri::High.level();
        let recovery = self.spontaneous_recovery;

        let mut hr: [f64; 3] = point(s.heart_rate.level());
        let mut bp: [f64; 3] = point(s.blood_pressure.level());
        let mut o2: [f64; 2] = point(s.oxygen.level());
        let mut glu: [f64; 5] = point(s.glucose.level());

        if a.antibiotics {
            shift(&mut hr, high, n3, self.abx_heart_rate * abx_scale);
            shift(&mut bp, high, n3, self.abx_blood_pressure * abx_scale);
        } else if s.abx_on {
            shift(&mut hr, n3, high, self.abx_withdrawal_heart_rate);
            shift(&mut bp, n3, high, self.abx_withdrawal_blood_pressure);
        }
        if a.vasopressors {
            let p = if s.diabetic { self.vaso_blood_pressure_diabetic } else { self.vaso_blood_pressure };
            step_up(&mut bp, p);
            if s.diabetic {
                step_up(&mut glu, self.vaso_glucose_diabetic);
            }
        } else if s.vaso_on {
            step_down(&mut bp, self.vaso_withdrawal_blood_pressure);
        }
        if a.ventilation {
            shift(&mut o2, 0, n2, self.vent_oxygen);
        } else if s.vent_on {
            shift(&mut o2, n2, 0, self.vent_withdrawal_oxygen);
        }

        let hr_treated = a.antibiotics;
        let bp_treated = a.antibiotics || a.vasopressors;
        let o2_treated = a.ventilation;
        let glu_drift = if s.diabetic { self.glucose_drift_diabetic } else { self.glucose_drift };
        let glu_treated = a.vasopressors && s.diabetic;

        let pick = |d: Drift, treated: bool| if treated { (0.0, d.treated) } else { (recovery, d.untreated) };
        let (r, d) = pick(self.heart_rate_drift, hr_treated);
        hr = natural(&hr, n3, r, d);
        let (r, d) = pick(self.blood_pressure_drift, bp_treated);
        bp = natural(&bp, n3, r, d);
        let (r, d) = pick(self.oxygen_drift, o2_treated);
        o2 = natural(&o2, n2, r, d);
        let (r, d) = pick(glu_drift, glu_treated);
        glu = natural(&glu, n5, r, d);

        VitalMarginals { heart_rate: hr, blood_pressure: bp, oxygen: o2, glucose: glu }
    }
}

// ── Environment ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SepsisEnv {
    config: SepsisDynamicsConfig,
}

impl SepsisEnv {
    pub fn new(config: SepsisDynamicsConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(SepsisEnv { config })
    }

    pub fn config(&self) -> &SepsisDynamicsConfig {
        &self.config
    }

    /// Draws the hidden context, then the admission state from the
    /// matching distribution. Treatment flags start off.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> (SepsisState, PatientContext) {
        let comorbid = rng.random::<f64>() < self.config.comorbidity_prevalence;
        let adm = if comorbid { self.config.comorbid_admission() } else { &self.config.admission };
        let state = SepsisState {
            heart_rate: Tri::from_level(sample_index(&adm.heart_rate, rng)),
            blood_pressure: Tri::from_level(sample_index(&adm.blood_pressure, rng)),
            oxygen: Oxygen::from_level(sample_index(&adm.oxygen, rng)),
            glucose: Glucose::from_level(sample_index(&adm.glucose, rng)),
            diabetic: rng.random::<f64>() < adm.diabetic,
            abx_on: false,
            vaso_on: false,
            vent_on: false,
        };
        (state, PatientContext { comorbid })
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &SepsisState,
        ctx: PatientContext,
        a: TreatmentAction,
        rng: &mut R,
    ) -> (SepsisState, Terminal, f64) {
        let m = self.config.marginals(s, ctx, a);
        let next = SepsisState {
            heart_rate: Tri::from_level(sample_index(&m.heart_rate, rng)),
            blood_pressure: Tri::from_level(sample_index(&m.blood_pressure, rng)),
            oxygen: Oxygen::from_level(sample_index(&m.oxygen, rng)),
            glucose: Glucose::from_level(sample_index(&m.glucose, rng)),
            diabetic: s.diabetic,
            ..SepsisState::healthy()
        }
        .with_treatment(a);
        let term = Terminal::classify(&next, a);
        (next, term, term.reward())
    }

    /// One episode from a fresh admission; the hidden context is dropped.
    pub fn rollout<R: Rng + ?Sized>(&self, policy: &TabularPolicy, participant_id: u64, rng: &mut R) -> Trajectory {
        let (s0, ctx) = self.sample_initial(rng);
        self.rollout_from(policy, participant_id, s0, ctx, rng)
    }

    pub fn rollout_from<R: Rng + ?Sized>(
        &self,
        policy: &TabularPolicy,
        participant_id: u64,
        s0: SepsisState,
        ctx: PatientContext,
        rng: &mut R,
    ) -> Trajectory {
        let mut s = s0;
        let mut steps = Vec::with_capacity(self.config.horizon);
        let mut early = false;
        for _ in 0..self.config.horizon {
            let idx = s.encode();
            let a = TreatmentAction::from_index(policy.sample(idx, rng));
            let (next, term, r) = self.step(&s, ctx, a, rng);
            steps.push(Step { state: idx, action: a.index(), reward: r });
            s = next;
            if term != Terminal::None {
                early = true;
                break;
            }
        }
        Trajectory {
            participant_id,
            steps,
            terminal_state: s.encode(),
            terminated_early: early,
            synthetic: false,
        }
    }

    /// `n` trajectories with participant ids `1..=n`; trajectory `i` draws
    /// only from stream `i` of `seed`.
    pub fn generate_dataset(&self, policy: &TabularPolicy, n: usize, seed: u64) -> Result<OfflineDataset, EnvError> {
        if n == 0 {
            return Err(EnvError::EmptyDataset);
        }
        if policy.n_states() != N_STATES || policy.n_actions() != N_ACTIONS {
            return Err(EnvError::PolicyShape(policy.id.clone()));
        }
        let trajectories = (1..=n as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = stream_rng(seed, id);
                self.rollout(policy, id, &mut rng)
            })
            .collect();
        let meta = DatasetMeta {
            gamma: self.config.gamma,
            horizon: self.config.horizon,
            behavior_policy_id: policy.id.clone(),
            seed,
        };
        Ok(OfflineDataset::new(meta, trajectories)?)
    }

    /// Transition tables for both comorbidity branches, weighted by
    /// prevalence and carrying each branch's admission distribution.
    pub fn exact_model(&self) -> Result<BranchedModel, EnvError> {
        let p_c = self.config.comorbidity_prevalence;
        let build = |comorbid: bool, adm: &AdmissionDistribution| -> Result<Branch, EnvError> {
            let ctx = PatientContext { comorbid };
            let rows = (0..N_STATES * N_ACTIONS)
                .map(|i| {
                    let s = SepsisState::decode(i / N_ACTIONS).expect("in range");
                    let a = TreatmentAction::from_index(i % N_ACTIONS);
                    self.outcomes(&s, ctx, a)
                })
                .collect();
            let initial = (0..N_STATES)
                .map(|i| adm.prob(&SepsisState::decode(i).expect("in range")))
                .collect();
            Ok(Branch {
                weight: if comorbid { p_c } else { 1.0 - p_c },
                initial,
                mdp: TabularMdp::new(N_STATES, N_ACTIONS, rows)?,
            })
        };
        Ok(BranchedModel {
            branches: vec![
                build(false, &self.config.admission)?,
                build(true, self.config.comorbid_admission())?,
            ],
            horizon: self.config.horizon,
        })
    }

    fn outcomes(&self, s: &SepsisState, ctx: PatientContext, a: TreatmentAction) -> Vec<Outcome> {
        let m = self.config.marginals(s, ctx, a);
        let mut out = Vec::new();
        for (h, ph) in m.heart_rate.iter().enumerate().filter(|x| *x.1 > 0.0) {
            for (b, pb) in m.blood_pressure.iter().enumerate().filter(|x| *x.1 > 0.0) {
                for (o, po) in m.oxygen.iter().enumerate().filter(|x| *x.1 > 0.0) {
                    for (g, pg) in m.glucose.iter().enumerate().filter(|x| *x.1 > 0.0) {
                        let next = SepsisState {
                            heart_rate: Tri::from_level(h),
                            blood_pressure: Tri::from_level(b),
                            oxygen: Oxygen::from_level(o),
                            glucose: Glucose::from_level(g),
                            diabetic: s.diabetic,
                            ..SepsisState::healthy()
                        }
                        .with_treatment(a);
                        let term = Terminal::classify(&next, a);
                        out.push(Outcome {
                            next: next.encode(),
                            prob: ph * pb * po * pg,
                            reward: term.reward(),
                            terminal: term != Terminal::None,
                        });
                    }
                }
            }
        }
        out
    }
}
