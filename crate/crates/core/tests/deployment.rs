//! The selection pipeline on simulated sepsis data: deployment coverage,
//! first-glance purity and the augmentation switch.

use std::collections::BTreeSet;

use fps_core::fps::{fps_deploy_state, fps_nota, fps_train, FpsConfig, SelectionTable, SepsisSpace};
use fps_core::mdp::Trajectory;
use fps_core::policy::{behavior_mixture, make_wa, make_woa, policy_iteration, soften, AntibioticScope, TabularPolicy, SOFTEN_EPS};
use fps_core::rng::stream_rng;
use fps_core::sepsis::{SepsisDynamicsConfig, SepsisEnv};

struct Setup {
    env: SepsisEnv,
    behavior: TabularPolicy,
    candidates: Vec<TabularPolicy>,
}

fn setup() -> Setup {
    let cfg = SepsisDynamicsConfig::default();
    let env = SepsisEnv::new(cfg.clone()).unwrap();
    let (pi, _) = policy_iteration(&env.exact_model().unwrap().marginal_mdp().unwrap(), cfg.gamma).unwrap();
    let pi = pi.with_id("pi");
    let behavior = behavior_mixture(&soften(&pi, SOFTEN_EPS).unwrap());
    let candidates = vec![make_woa(&pi, AntibioticScope::Admission).unwrap(), make_wa(&pi, AntibioticScope::Admission).unwrap(), pi];
    Setup { env, behavior, candidates }
}

fn table(s: &Setup, data: &[Trajectory], config: &FpsConfig) -> SelectionTable {
    let refs: Vec<&TabularPolicy> = s.candidates.iter().collect();
    fps_train(data, &refs, &s.behavior, &SepsisSpace, config).unwrap()
}

fn no_augment() -> FpsConfig {
    FpsConfig { augment: None, seed: 3, ..Default::default() }
}

#[test]
fn fresh_admissions_reach_every_subgroup() {
    let s = setup();
    let d = s.env.generate_dataset(&s.behavior, 2000, 1).unwrap();
    let t = table(&s, &d.trajectories, &no_augment());
    let mut rng = stream_rng(2, 0);
    let mut hit = BTreeSet::new();
    for _ in 0..10_000 {
        let (s0, _) = s.env.sample_initial(&mut rng);
        let policy = fps_deploy_state(s0.encode(), &SepsisSpace, &t).unwrap();
        hit.insert(t.subgroup_of(&fps_core::subgroup::encode_features(&s0)).unwrap());
        assert!(t.policy_ids.iter().any(|p| p == policy));
    }
    assert_eq!(hit.len(), t.rows.len(), "subgroups reached: {hit:?} of {}", t.rows.len());
}

#[test]
fn deployment_ignores_everything_after_admission() {
    let s = setup();
    let d = s.env.generate_dataset(&s.behavior, 1000, 4).unwrap();
    let t = table(&s, &d.trajectories, &no_augment());
    let arrivals = s.env.generate_dataset(&s.behavior, 500, 5).unwrap().trajectories;
    let first: Vec<String> =
        arrivals.iter().map(|a| fps_deploy_state(a.initial_state(), &SepsisSpace, &t).unwrap().to_string()).collect();
    // Replay with every later step rewritten.
    let mut mutated = arrivals.clone();
    for a in &mut mutated {
        for st in a.steps.iter_mut().skip(1) {
            st.state = (st.state + 7) % 1440;
            st.action = (st.action + 3) % 8;
            st.reward = -st.reward;
        }
        a.terminal_state = 0;
    }
    let replay: Vec<String> =
        mutated.iter().map(|a| fps_deploy_state(a.initial_state(), &SepsisSpace, &t).unwrap().to_string()).collect();
    assert_eq!(first, replay);
}

#[test]
fn the_no_augmentation_variant_is_the_switched_off_pipeline() {
    let s = setup();
    let d = s.env.generate_dataset(&s.behavior, 600, 6).unwrap();
    let refs: Vec<&TabularPolicy> = s.candidates.iter().collect();
    let cfg = FpsConfig { seed: 9, ..Default::default() };
    let nota = fps_nota(&d.trajectories, &refs, &s.behavior, &SepsisSpace, &cfg).unwrap();
    let off = table(&s, &d.trajectories, &FpsConfig { augment: None, ..cfg.clone() });
    assert_eq!(nota.to_json().unwrap(), off.to_json().unwrap());
    assert!(nota.rows.iter().all(|r| r.n_synthetic == 0));

    // With augmentation, rows whose estimate gaps exceed both variance
    // bounds keep their selection.
    let aug = table(&s, &d.trajectories, &cfg);
    assert_eq!(aug.partition, nota.partition);
    for (a, n) in aug.rows.iter().zip(&nota.rows) {
        if a.small_subgroup {
            continue;
        }
        let clear = |r: &fps_core::fps::SelectionRow| {
            let best = r.estimate(&r.best_policy).unwrap();
            r.estimates.iter().filter(|e| e.policy_id != r.best_policy).all(|e| {
                let gap = best.d_hat - e.d_hat;
                gap > best.variance_bound.unwrap_or(f64::INFINITY) && gap > e.variance_bound.unwrap_or(f64::INFINITY)
            })
        };
        if clear(a) && clear(n) {
            assert_eq!(a.best_policy, n.best_policy, "subgroup {}", a.subgroup);
        }
    }
}
