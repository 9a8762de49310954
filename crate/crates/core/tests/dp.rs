use meanstop_core::dp::{
    epsilon_optimal_policy, optimality_audit, project_to_cu, Candidate, CandidateValue, StopFamily,
};
use meanstop_core::measure::{Particle, RandomizedStopRule, SplitMode, StoppedEnsemble};
use meanstop_core::sim::{simulate, SimConfig, SnapshotMode, StoppingPolicy};
use meanstop_core::smooth::{SmoothInstance, HORIZON};
use meanstop_core::Error;
use proptest::prelude::*;

fn ensemble(points: &[(f64, bool)]) -> StoppedEnsemble {
    let w = 1.0 / points.len() as f64;
    StoppedEnsemble::new(
        1,
        points
            .iter()
            .map(|(x, i)| Particle::scalar(*x, *i, w))
            .collect(),
    )
    .unwrap()
}

fn arb_points() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-3.0..3.0f64, any::<bool>()), 1..10)
}

#[test]
fn residual_of_the_reference_instance() {
    let inst = SmoothInstance::point_mass();
    let m0 = SmoothInstance::initial_law();
    assert!((inst.residual(0.0, &m0) - 0.5).abs() < 1e-15);
    let half = m0
        .apply_randomized_stop(&RandomizedStopRule::Constant(0.5), SplitMode::WeightSplit)
        .unwrap();
    assert_eq!(inst.residual(0.0, &half), 0.0);
    let generic = CandidateValue::new(inst.functional(), inst.model(), HORIZON);
    assert!((generic.residual(0.0, &m0) - 0.5).abs() < 1e-8);
}

#[test]
fn boundary_identity_on_random_ensembles() {
    let inst = SmoothInstance::point_mass();
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..1000 {
        let n = 1 + (next() * 8.0) as usize;
        let pts: Vec<(f64, bool)> = (0..n).map(|_| (6.0 * next() - 3.0, next() < 0.5)).collect();
        assert_eq!(inst.boundary_gap(&ensemble(&pts)), 0.0);
    }
}

#[test]
fn projection_of_the_initial_law() {
    let inst = SmoothInstance::point_mass();
    let p = project_to_cu(
        inst.as_ref(),
        0.0,
        &SmoothInstance::initial_law(),
        &StopFamily::constant(),
        1e-8,
    )
    .unwrap();
    assert!((p.theta - 0.5).abs() < 1e-8);
    assert!((p.measure.survival_mass() - 0.5).abs() < 1e-8);
    assert!((p.value_after - p.value_before).abs() < 1e-12);
}

#[test]
fn projection_errors() {
    // a stop family that never kills cannot reach the level set
    let inst = SmoothInstance::point_mass();
    let idle = StopFamily::new(|_| RandomizedStopRule::Constant(1.0));
    let err = project_to_cu(
        inst.as_ref(),
        0.0,
        &SmoothInstance::initial_law(),
        &idle,
        1e-8,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ProjectionInfeasible { .. }));
}

#[test]
fn epsilon_optimal_schedule_starts_with_half_stop() {
    let inst = SmoothInstance::point_mass();
    let cfg = SimConfig::new(HORIZON, 2000, 256, 3);
    let out = epsilon_optimal_policy(
        inst.as_ref(),
        &inst.model(),
        &SmoothInstance::initial_law(),
        8,
        &StopFamily::constant(),
        1e-8,
        cfg.clone(),
    )
    .unwrap();
    assert_eq!(out.thetas.len(), 8);
    assert_eq!(out.thetas[0].0, 0.0);
    assert!((out.thetas[0].1 - 0.5).abs() < 1e-8);
    assert_eq!(out.predicted_value, 2.0);
    let StoppingPolicy::ScheduledMassStop(schedule) = &out.policy else {
        panic!("{:?}", out.policy)
    };
    assert_eq!(schedule[0].0, 0.0);
    let bad = epsilon_optimal_policy(
        inst.as_ref(),
        &inst.model(),
        &SmoothInstance::initial_law(),
        7,
        &StopFamily::constant(),
        1e-8,
        cfg,
    );
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn audit_separates_optimal_from_suboptimal() {
    let inst = SmoothInstance::point_mass();
    let model = inst.model();
    let m0 = SmoothInstance::initial_law();
    let cfg = SimConfig::new(HORIZON, 5000, 400, 21).with_snapshots(SnapshotMode::All);
    let optimal = simulate(&model, &SmoothInstance::optimal_policy(), &m0, cfg.clone()).unwrap();
    let report = optimality_audit(inst.as_ref(), &optimal, 0.02).unwrap();
    assert!(report.pass, "{report:?}");
    let everything_now = simulate(
        &model,
        &StoppingPolicy::StopAll { time: 0.0 },
        &m0,
        cfg.clone(),
    )
    .unwrap();
    let report = optimality_audit(inst.as_ref(), &everything_now, 0.02).unwrap();
    assert!(!report.pass, "{report:?}");
    assert!(!report.d_i_ok);
    let no_barrier = StoppingPolicy::Composite(vec![
        StoppingPolicy::ScheduledMassStop(vec![(0.0, RandomizedStopRule::Constant(0.5))]),
        StoppingPolicy::StopAll { time: HORIZON },
    ]);
    let flow = simulate(&model, &no_barrier, &m0, cfg).unwrap();
    let report = optimality_audit(inst.as_ref(), &flow, 0.02).unwrap();
    assert!(!report.residual_ok, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_is_nonnegative(pts in arb_points(), t in 0.0..2.0f64) {
        let inst = SmoothInstance::point_mass();
        prop_assert!(inst.residual(t, &ensemble(&pts)) >= -1e-8);
    }

    #[test]
    fn projection_lands_on_the_level_set(pts in arb_points(), t in 0.0..0.99f64) {
        let inst = SmoothInstance::point_mass();
        let m = ensemble(&pts);
        let tol = 1e-8;
        let family = StopFamily::constant();
        let p = project_to_cu(inst.as_ref(), t, &m, &family, tol).unwrap();
        prop_assert!(p.residual <= tol);
        prop_assert!(p.measure.survival_mass() <= m.survival_mass() + 1e-15);
        prop_assert!((p.measure.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((p.value_after - p.value_before).abs() <= tol.max(1e-10));
        if p.theta > 1e-6 {
            let less = m.apply_randomized_stop(&family.rule(p.theta - 1e-6), SplitMode::WeightSplit).unwrap();
            prop_assert!(inst.residual(t, &less) > tol);
        }
    }
}
