//! The sepsis policy suite and its ground-truth values.

use std::collections::BTreeMap;

use fps_core::model::{BranchedModel, Horizon};
use fps_core::policy::{behavior_mixture, make_wa, make_woa, policy_iteration, soften, AntibioticScope, TabularPolicy, SOFTEN_EPS};
use fps_core::sepsis::{SepsisDynamicsConfig, SepsisEnv};
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Per-initial-state policy values keyed by policy id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub values: BTreeMap<String, Vec<f64>>,
}

impl Oracle {
    pub fn value(&self, policy: &str, s0: usize) -> Result<f64, BenchError> {
        self.values
            .get(policy)
            .and_then(|v| v.get(s0))
            .copied()
            .ok_or_else(|| BenchError::MissingOracle { policy: policy.into(), state: s0 })
    }

    pub fn best(&self, policies: &[String], s0: usize) -> Result<f64, BenchError> {
        let mut best = f64::NEG_INFINITY;
        for p in policies {
            best = best.max(self.value(p, s0)?);
        }
        Ok(best)
    }

    /// Mean of `V(policy | s0)` over a cohort.
    pub fn cohort_mean(&self, policy: &str, cohort: &[usize]) -> Result<f64, BenchError> {
        let mut total = 0.0;
        for &s in cohort {
            total += self.value(policy, s)?;
        }
        Ok(total / cohort.len() as f64)
    }
}

pub struct SepsisSuite {
    pub env: SepsisEnv,
    pub model: BranchedModel,
    pub behavior: TabularPolicy,
    /// WOA, WA and the planned policy, in that order.
    pub candidates: Vec<TabularPolicy>,
    /// Values with the environment's discount.
    pub oracle: Oracle,
    /// Undiscounted outcome values over the same horizon.
    pub oracle_undiscounted: Oracle,
}

impl SepsisSuite {
    pub fn build(config: &SepsisDynamicsConfig, scope: AntibioticScope) -> Result<Self, BenchError> {
        let env = SepsisEnv::new(config.clone())?;
        let model = env.exact_model()?;
        let (planned, _) = policy_iteration(&model.marginal_mdp()?, config.gamma)?;
        let pi = planned.with_id("pi");
        let behavior = behavior_mixture(&soften(&pi, SOFTEN_EPS)?);
        let candidates = vec![make_woa(&pi, scope)?, make_wa(&pi, scope)?, pi];
        let horizon = Horizon::Finite(config.horizon);
        let table = |gamma: f64| -> Result<Oracle, BenchError> {
            let mut values = BTreeMap::new();
            for p in &candidates {
                values.insert(p.id.clone(), model.value_by_initial_state(p, gamma, horizon)?);
            }
            Ok(Oracle { values })
        };
        let oracle = table(config.gamma)?;
        let oracle_undiscounted = table(1.0)?;
        Ok(SepsisSuite { env, model, behavior, candidates, oracle, oracle_undiscounted })
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|p| p.id.clone()).collect()
    }

    pub fn candidate_refs(&self) -> Vec<&TabularPolicy> {
        self.candidates.iter().collect()
    }
}
