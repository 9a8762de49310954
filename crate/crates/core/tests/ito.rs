use std::sync::Arc;

use meanstop_core::ito::{ito_decompose, reference_functionals, ItoAccumulator};
use meanstop_core::measure::{
    CylindricalFunctional, FunctionalSum, MeasureFunctional, Outer, RandomizedStopRule,
    ScalarTestFunction, StoppedEnsemble,
};
use meanstop_core::sim::{
    simulate, simulate_observed, ModelSpec, SimConfig, SnapshotMode, StoppingPolicy,
};
use meanstop_core::Error;

fn half_stop() -> StoppingPolicy {
    StoppingPolicy::ScheduledMassStop(vec![(0.0, RandomizedStopRule::Constant(0.5))])
}

fn origin() -> StoppedEnsemble {
    StoppedEnsemble::dirac(&[0.0], true)
}

fn full(n: usize, steps: usize, seed: u64) -> SimConfig {
    SimConfig::new(1.0, n, steps, seed).with_snapshots(SnapshotMode::All)
}

#[test]
fn constant_functional_has_zero_terms() {
    let model = ModelSpec::brownian(0.0, 1.0);
    let flow = simulate(&model, &half_stop(), &origin(), full(200, 50, 1)).unwrap();
    let u = CylindricalFunctional::new(ScalarTestFunction::gaussian_alive(), Outer::constant(3.0));
    let d = ito_decompose(&u, &flow, &model).unwrap();
    assert_eq!(
        (
            d.lhs,
            d.drift_term,
            d.jump_flow_term,
            d.jump_individual_term,
            d.residual
        ),
        (0.0, 0.0, 0.0, 0.0, 0.0)
    );
}

#[test]
fn linear_position_is_a_martingale() {
    let n = 4000;
    let model = ModelSpec::brownian(0.0, 1.0);
    let flow = simulate(
        &model,
        &StoppingPolicy::NeverStop,
        &origin(),
        full(n, 100, 2),
    )
    .unwrap();
    let u = CylindricalFunctional::new(ScalarTestFunction::identity(), Outer::linear(1.0));
    let d = ito_decompose(&u, &flow, &model).unwrap();
    assert_eq!(d.drift_term, 0.0);
    assert_eq!(d.jump_flow_term, 0.0);
    assert_eq!(d.jump_individual_term, 0.0);
    // the empirical mean at T = 1 has standard deviation 1 / sqrt(n)
    assert!(d.lhs.abs() < 3.0 / (n as f64).sqrt());
    assert!(d.is_finite());
}

#[test]
fn never_stop_has_no_jump_terms() {
    let model = ModelSpec::brownian(0.1, 0.8);
    let flow = simulate(
        &model,
        &StoppingPolicy::NeverStop,
        &origin(),
        full(500, 40, 3),
    )
    .unwrap();
    for u in reference_functionals() {
        let d = ito_decompose(&u, &flow, &model).unwrap();
        assert_eq!(d.jump_flow_term, 0.0);
        assert_eq!(d.jump_individual_term, 0.0);
    }
}

#[test]
fn scheduled_stop_is_the_only_jump() {
    let model = ModelSpec::brownian(0.0, 1.0);
    let policy = StoppingPolicy::ScheduledMassStop(vec![(0.25, RandomizedStopRule::Constant(0.4))]);
    let cfg = SimConfig::new(1.0, 400, 40, 4);
    let u = &reference_functionals()[1];
    let mut acc = ItoAccumulator::new(u, &model);
    simulate_observed(&model, &policy, &origin(), cfg, &mut [&mut acc]).unwrap();
    let d = acc.finish().unwrap();
    assert_eq!(d.jump_individual_term, 0.0);
    assert_eq!(acc.jumps.len(), 1);
    assert_eq!(acc.jumps[0].0, 10);
    assert!(acc.jumps[0].1 != 0.0);
    assert_eq!(d.jump_flow_term, acc.jumps[0].1);
}

#[test]
fn individual_stops_enter_the_d_i_term() {
    let model = ModelSpec::brownian(0.0, 1.0);
    let policy = StoppingPolicy::Barrier { t0: 0.0, c: 0.5 };
    let flow = simulate(&model, &policy, &origin(), full(2000, 200, 5)).unwrap();
    let u = &reference_functionals()[0];
    let d = ito_decompose(u, &flow, &model).unwrap();
    assert_eq!(d.jump_flow_term, 0.0);
    // D_I u = e^{-x^2/2} > 0, so stopping lowers u
    assert!(d.jump_individual_term < 0.0);
    assert!(d.residual.abs() < 0.05, "{d:?}");
}

#[test]
fn decomposition_is_additive() {
    let model = ModelSpec::brownian(0.2, 1.0);
    let policy = StoppingPolicy::Composite(vec![
        half_stop(),
        StoppingPolicy::Barrier { t0: 0.5, c: 0.3 },
    ]);
    let flow = simulate(&model, &policy, &origin(), full(300, 60, 6)).unwrap();
    let parts: Vec<Arc<dyn MeasureFunctional>> = reference_functionals()
        .into_iter()
        .map(|u| Arc::new(u) as Arc<dyn MeasureFunctional>)
        .collect();
    let sum = FunctionalSum(parts.clone());
    let total = ito_decompose(&sum, &flow, &model).unwrap();
    let pieces: Vec<_> = parts
        .iter()
        .map(|u| ito_decompose(u.as_ref(), &flow, &model).unwrap())
        .collect();
    let add =
        |f: fn(&meanstop_core::ito::ItoDecomposition) -> f64| pieces.iter().map(f).sum::<f64>();
    assert!((total.lhs - add(|d| d.lhs)).abs() < 1e-12);
    assert!((total.drift_term - add(|d| d.drift_term)).abs() < 1e-12);
    assert!((total.jump_flow_term - add(|d| d.jump_flow_term)).abs() < 1e-12);
    assert!((total.jump_individual_term - add(|d| d.jump_individual_term)).abs() < 1e-12);
}

#[test]
fn squared_statistic_on_a_stopped_flow() {
    let model = ModelSpec::brownian(0.0, 1.0);
    let u = &reference_functionals()[1];
    let mut acc = ItoAccumulator::new(u, &model);
    simulate_observed(
        &model,
        &half_stop(),
        &origin(),
        SimConfig::new(1.0, 10_000, 1000, 7),
        &mut [&mut acc],
    )
    .unwrap();
    let d = acc.finish().unwrap();
    assert!(d.residual.abs() <= 0.05, "{d:?}");
}

#[test]
fn missing_snapshots_are_reported() {
    let model = ModelSpec::brownian(0.0, 1.0);
    let flow = simulate(
        &model,
        &half_stop(),
        &origin(),
        SimConfig::new(1.0, 10, 10, 8),
    )
    .unwrap();
    let err = ito_decompose(&reference_functionals()[0], &flow, &model).unwrap_err();
    assert!(matches!(err, Error::MissingData(_)));
}
