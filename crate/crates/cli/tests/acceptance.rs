//! Prints one `[PASS]` or `[FAIL]` line per acceptance criterion.

use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use meanstop_cli::run::flow_checks;
use meanstop_core::dp::{epsilon_optimal_policy, OptimalityAuditor, StopFamily};
use meanstop_core::dual::{
    dual_value, optimal_policy_for_dual, DecoupledModel, DualCriterion, MeanVariance,
};
use meanstop_core::ito::{
    find_increasing_stop, monotonicity_probe, reference_functionals, refinement_study,
};
use meanstop_core::measure::{
    CylindricalFunctional, MeasureFunctional, Outer, Particle, RandomizedStopRule,
    ScalarTestFunction, StoppedEnsemble,
};
use meanstop_core::obstacle::{
    dpp_check, payoff_model, pure_region_policy, solve_obstacle, ObstacleSettings, Payoff,
};
use meanstop_core::sim::{
    grid_1d, objective, simulate, simulate_observed, value_search, SimConfig, StoppingPolicy,
};
use meanstop_core::smooth::{SmoothInstance, HORIZON};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Everything the optimal-flow criteria share.
struct OptimalRun {
    elapsed: Duration,
    value: f64,
    stderr: f64,
    massive_stop_mass: f64,
    max_late_gap: f64,
    max_early_z: f64,
    audit_pass: bool,
    audit_detail: String,
}

fn optimal_run() -> OptimalRun {
    let inst = SmoothInstance::point_mass();
    let model = inst.model();
    let n = 100_000;
    let cfg = SimConfig::new(HORIZON, n, 4000, 7);
    let mut auditor = OptimalityAuditor::new(inst.as_ref(), 0.02);
    let start = Instant::now();
    let flow = simulate_observed(
        &model,
        &SmoothInstance::optimal_policy(),
        &SmoothInstance::initial_law(),
        cfg,
        &mut [&mut auditor],
    )
    .expect("optimal flow");
    let est = objective(&flow, &model).expect("objective");
    let elapsed = start.elapsed();
    let checks = flow_checks(&inst, &flow, n, true);
    let audit = auditor.report();
    OptimalRun {
        elapsed,
        value: est.value,
        stderr: est.stderr,
        massive_stop_mass: checks.massive_stop_mass,
        max_late_gap: checks.max_late_gap,
        max_early_z: checks.max_early_z.unwrap_or(f64::INFINITY),
        audit_pass: audit.pass,
        audit_detail: format!(
            "residual {:.4}, mean |D_I| {:.2e}",
            audit.max_residual, audit.mean_abs_d_i
        ),
    }
}

fn value_identity(r: &OptimalRun) -> Outcome {
    let tol = (3.0 * r.stderr).max(0.02 * 2.0);
    let pass = (r.value - 2.0).abs() <= tol && r.elapsed.as_secs_f64() <= 60.0;
    outcome(
        pass,
        format!(
            "value {:.5} +- {:.5} vs 2, {:.1} s",
            r.value,
            r.stderr,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn flow_identities(r: &OptimalRun) -> Outcome {
    let pass = r.max_late_gap <= 0.01 && r.max_early_z <= 3.0 && r.massive_stop_mass == 0.5;
    outcome(
        pass,
        format!(
            "max |v0 - a| on (1,2) {:.4}, max early z {:.2}, massive stop {}",
            r.max_late_gap, r.max_early_z, r.massive_stop_mass
        ),
    )
}

fn threshold_regularity() -> Outcome {
    let inst = SmoothInstance::point_mass();
    let gap = (inst.threshold(1.0) - inst.threshold_right_of_one()).abs();
    let slope_gap =
        (inst.threshold_derivative(1.0) - inst.threshold_derivative_right_of_one()).abs();
    let a0 = inst.threshold(0.0);
    outcome(
        gap <= 1e-6 && slope_gap <= 1e-3 && a0 == 0.5,
        format!("|a(1-)-a(1+)| {gap:.1e}, |a'(1-)-a'(1+)| {slope_gap:.1e}, a(0) {a0}"),
    )
}

fn ito_checker() -> Outcome {
    let funcs = reference_functionals();
    let refs: Vec<&dyn MeasureFunctional> =
        funcs.iter().map(|f| f as &dyn MeasureFunctional).collect();
    let model = meanstop_core::ModelSpec::brownian(0.0, 1.0);
    let policy = StoppingPolicy::ScheduledMassStop(vec![(0.5, RandomizedStopRule::Constant(0.5))]);
    let m0 = StoppedEnsemble::dirac(&[0.0], true);
    let levels = [(250, 625), (500, 2500), (1000, 10_000), (2000, 40_000)];
    let report = refinement_study(&refs, &model, &policy, &m0, 1.0, &levels, &[1, 2, 3, 4, 5])
        .expect("refinement");
    let base = &report.levels[2];
    let worst = base
        .decompositions
        .iter()
        .flatten()
        .map(|d| d.residual.abs())
        .fold(0.0, f64::max);
    let ratio = report
        .mean_ratio
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    outcome(
        worst <= 0.05 && ratio >= 1.3,
        format!("max |residual| at N=1e4, dt=1e-3: {worst:.4}; min mean ratio {ratio:.2}"),
    )
}

fn monotonicity_suite() -> Outcome {
    let mut rng = StdRng::seed_from_u64(17);
    let mut violations = 0;
    for _ in 0..1000 {
        let c = rng.random_range(0.1..2.0);
        let shift = rng.random_range(0.0..1.0);
        let psi = ScalarTestFunction::new(
            move |x: f64| shift + 1.0 + x * x,
            |x| 2.0 * x,
            |_| 2.0,
            move |x| shift + 0.5 * x * x,
        );
        let u = CylindricalFunctional::new(
            psi,
            Outer::new(
                move |_, v| (c * v).exp(),
                |_, _| 0.0,
                move |_, v| c * (c * v).exp(),
            ),
        );
        let len = rng.random_range(1..8);
        let particles: Vec<Particle> = (0..len)
            .map(|_| {
                Particle::scalar(
                    rng.random_range(-3.0..3.0),
                    rng.random_bool(0.7),
                    1.0 / len as f64,
                )
            })
            .collect();
        let m = StoppedEnsemble::new(1, particles).expect("ensemble");
        let rule = match rng.random_range(0..3) {
            0 => RandomizedStopRule::Constant(rng.random_range(0.0..=1.0)),
            1 => RandomizedStopRule::Threshold {
                threshold: rng.random_range(-2.0..2.0),
                keep_below: rng.random_bool(0.5),
            },
            _ => RandomizedStopRule::tabulated(
                vec![-1.0, 1.0],
                vec![rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)],
            )
            .expect("rule"),
        };
        let report = monotonicity_probe(&u, 0.0, &[(m, rule)]).expect("probe");
        violations += report.violations.len();
    }
    let flipped = CylindricalFunctional::new(ScalarTestFunction::survival(), Outer::linear(-1.0));
    let m = StoppedEnsemble::uniform_1d(&[-0.5, 0.3, 1.2], true).expect("ensemble");
    let converse = find_increasing_stop(&flipped, 0.0, &m)
        .expect("probe")
        .is_some();
    outcome(
        violations == 0 && converse,
        format!("{violations} violations in 1000 samples; converse found: {converse}"),
    )
}

fn obstacle_pde() -> Outcome {
    let settings = ObstacleSettings::new(1.0, -6.0, 6.0, 256, 256);
    let zero = |_: f64, _: f64| 0.0;
    let one = |_: f64, _: f64| 1.0;
    let convex = solve_obstacle(&zero, &one, &Payoff::function(|x| x * x), &settings).expect("x^2");
    let v00 = convex.value(0.0, 0.0);
    let concave =
        solve_obstacle(&zero, &one, &Payoff::function(|x| -x * x), &settings).expect("-x^2");
    let w = concave.width();
    let stuck = concave
        .v
        .iter()
        .enumerate()
        .map(|(k, v)| (v - concave.phi[k % w]).abs())
        .fold(0.0, f64::max);
    let bump = Payoff::function(|x| (-x * x).exp());
    let start = StoppedEnsemble::uniform_1d(&[-1.5, -0.2, 0.4, 1.8], true).expect("ensemble");
    let bump_grid = Arc::new(
        solve_obstacle(
            &zero,
            &one,
            &bump,
            &ObstacleSettings::around(&start, 1.0, 1.0, 256, 256),
        )
        .expect("bump"),
    );
    let comp = [
        convex.complementarity,
        concave.complementarity,
        bump_grid.complementarity,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let lifted = bump_grid.lift_value(0.0, &start).expect("lift");
    let model = payoff_model(Arc::new(zero), Arc::new(one), bump);
    let flow = simulate(
        &model,
        &pure_region_policy(bump_grid),
        &start,
        SimConfig::new(1.0, 40_000, 1000, 4),
    )
    .expect("flow");
    let est = objective(&flow, &model).expect("objective");
    let round_trip = (est.value - lifted).abs() <= 3.0 * est.stderr + 1e-2;
    outcome(
        (v00 - 1.0).abs() <= 1e-3 && stuck <= 1e-6 && comp <= 5e-3 && round_trip,
        format!(
            "v(0,0) {v00:.6}, max |v - phi| for -x^2 {stuck:.1e}, complementarity {comp:.1e}, lift {lifted:.4} vs MC {:.4} +- {:.4}",
            est.value, est.stderr
        ),
    )
}

fn convex_dual() -> Outcome {
    let crit = DualCriterion::mean_variance(MeanVariance::Standard);
    let bm = DecoupledModel::brownian();
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64);
    for x in [-1.0, 0.0, 0.7, 2.0] {
        let m = StoppedEnsemble::dirac(&[x], true);
        let r = dual_value(
            &crit,
            &bm,
            0.0,
            &m,
            &ObstacleSettings::around(&m, 1.0, 1.0, 128, 128),
        )
        .expect("dual");
        worst.0 = worst.0.max((r.value - x).abs());
        worst.1 = worst.1.max((r.alpha_star - x).abs());
        ok &= (r.value - x).abs() <= 1e-2 && (r.alpha_star - x).abs() <= 0.05;
    }
    // deterministic stopping times as an independent primal search
    let m = StoppedEnsemble::dirac(&[0.7], true);
    let spec = bm.with_criterion(&crit);
    let cfg = SimConfig::new(1.0, 20_000, 100, 2);
    let search = value_search(
        &spec,
        |p| StoppingPolicy::StopAll { time: p[0] },
        &grid_1d(0.0, 1.0, 6),
        &m,
        &cfg,
    )
    .expect("search");
    let search_ok = (search.best_value - 0.7).abs() <= 1e-2;

    let mut rng = StdRng::seed_from_u64(31);
    let mut weak = 0;
    for instance in 0..5u64 {
        let (c, amp, k) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.2..2.0),
        );
        let crit = DualCriterion::new(
            move |x: f64| amp * (-(x - c) * (x - c)).exp(),
            |x: f64| x.tanh(),
            move |b| k * b * b,
        )
        .with_alpha_grid(-4.0, 4.0, 41);
        let pts: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let m = StoppedEnsemble::uniform_1d(&pts, true).expect("ensemble");
        let s = ObstacleSettings::around(&m, 1.0, 1.0, 128, 128);
        let dual = dual_value(&crit, &bm, 0.0, &m, &s).expect("dual");
        let spec = bm.with_criterion(&crit);
        let cfg = SimConfig::new(1.0, 20_000, 200, 40 + instance);
        let policies = [
            StoppingPolicy::StopAll { time: 0.0 },
            StoppingPolicy::NeverStop,
            StoppingPolicy::StopAll { time: 0.5 },
            optimal_policy_for_dual(&crit, &bm, &s, dual.alpha_star).expect("policy"),
        ];
        let holds = policies.iter().all(|p| {
            let est = objective(&simulate(&spec, p, &m, cfg.clone()).expect("flow"), &spec)
                .expect("objective");
            est.value <= dual.value + 3.0 * est.stderr + 1e-2
        });
        weak += usize::from(holds);
    }
    outcome(
        ok && search_ok && weak == 5,
        format!(
            "max value error {:.1e}, max alpha* error {:.1e}, policy search {:.4}, weak duality {weak}/5",
            worst.0, worst.1, search.best_value
        ),
    )
}

fn dpp() -> Outcome {
    let bump = Payoff::function(|x| (-x * x).exp());
    let m0 = StoppedEnsemble::uniform_1d(&[-1.0, 0.5, 1.5], true).expect("ensemble");
    let zero = |_: f64, _: f64| 0.0;
    let one = |_: f64, _: f64| 1.0;
    let grid = Arc::new(
        solve_obstacle(
            &zero,
            &one,
            &bump,
            &ObstacleSettings::around(&m0, 1.0, 1.0, 256, 256),
        )
        .expect("grid"),
    );
    let model = payoff_model(Arc::new(zero), Arc::new(one), bump);
    let mut pass = true;
    let mut detail = Vec::new();
    for s in [0.25, 0.5] {
        let r = dpp_check(
            grid.clone(),
            &model,
            &m0,
            s,
            SimConfig::new(1.0, 40_000, 1000, 5),
        )
        .expect("dpp");
        let tol = 3.0 * (r.one_stage.stderr.powi(2) + r.two_stage_stderr.powi(2)).sqrt() + 1e-2;
        pass &= (r.one_stage.value - r.two_stage).abs() <= tol;
        detail.push(format!(
            "s={s}: {:.4} vs {:.4}",
            r.one_stage.value, r.two_stage
        ));
    }
    outcome(pass, detail.join(", "))
}

fn epsilon_optimal() -> Outcome {
    let inst = SmoothInstance::point_mass();
    let model = inst.model();
    let m0 = SmoothInstance::initial_law();
    let mut values = Vec::new();
    for n in [8, 16, 32, 64] {
        let built = epsilon_optimal_policy(
            inst.as_ref(),
            &model,
            &m0,
            n,
            &StopFamily::constant(),
            1e-8,
            SimConfig::new(HORIZON, 20_000, 2048, 11),
        )
        .expect("construction");
        let flow = simulate(
            &model,
            &built.policy,
            &m0,
            SimConfig::new(HORIZON, 20_000, 2048, 12),
        )
        .expect("flow");
        values.push(objective(&flow, &model).expect("objective"));
    }
    let monotone = values.windows(2).all(|w| {
        w[1].value >= w[0].value - 3.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt()
    });
    let last = values[3].value;
    let listed: Vec<String> = values.iter().map(|v| format!("{:.4}", v.value)).collect();
    outcome(
        monotone && last >= 1.96,
        format!("n = 8, 16, 32, 64: {}", listed.join(", ")),
    )
}

fn audit(r: &OptimalRun) -> Outcome {
    let inst = SmoothInstance::point_mass();
    let model = inst.model();
    let m0 = SmoothInstance::initial_law();
    let suboptimal = [
        ("StopAll{0}", StoppingPolicy::StopAll { time: 0.0 }),
        (
            "NeverStop then StopAll{2}",
            StoppingPolicy::Composite(vec![
                StoppingPolicy::NeverStop,
                StoppingPolicy::StopAll { time: HORIZON },
            ]),
        ),
        ("barrier c=0.5", SmoothInstance::policy_with_barrier(0.5)),
    ];
    let mut pass = r.audit_pass;
    let mut detail = vec![format!(
        "optimal {} ({})",
        if r.audit_pass { "PASS" } else { "FAIL" },
        r.audit_detail
    )];
    for (name, policy) in &suboptimal {
        let mut auditor = OptimalityAuditor::new(inst.as_ref(), 0.02);
        simulate_observed(
            &model,
            policy,
            &m0,
            SimConfig::new(HORIZON, 20_000, 4000, 8),
            &mut [&mut auditor],
        )
        .expect("flow");
        let rep = auditor.report();
        pass &= !rep.pass;
        detail.push(format!(
            "{name} {} (residual {:.4}, mean |D_I| {:.4})",
            if rep.pass { "PASS" } else { "FAIL" },
            rep.max_residual,
            rep.mean_abs_d_i
        ));
    }
    outcome(pass, detail.join("; "))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_meanstop");
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let tmp = tempfile::tempdir().expect("tempdir");
    let runs = [
        (
            "simulate",
            "simulate.json",
            vec!["--particles", "5000", "--steps", "200"],
        ),
        (
            "example53",
            "example53.json",
            vec!["--particles", "5000", "--steps", "400"],
        ),
        ("dual", "dual_mean_variance.json", vec![]),
        (
            "dpp-check",
            "dpp_check.json",
            vec!["--particles", "5000", "--steps", "200"],
        ),
    ];
    let mut identical = true;
    let mut files = 0;
    for (kind, file, extra) in &runs {
        let dirs: Vec<_> = ["1", "4", "4"]
            .iter()
            .enumerate()
            .map(|(k, threads)| {
                let dir = tmp.path().join(format!("{kind}-{k}"));
                let status = Command::new(bin)
                    .args([
                        kind,
                        "--scenario",
                        scenarios.join(file).to_str().unwrap(),
                        "--out",
                        dir.to_str().unwrap(),
                        "--threads",
                        threads,
                    ])
                    .args(extra)
                    .stdout(Stdio::null())
                    .status()
                    .expect("meanstop runs");
                identical &= status.success();
                dir
            })
            .collect();
        for entry in std::fs::read_dir(&dirs[0]).expect("outputs") {
            let name = entry.expect("entry").file_name();
            let first = std::fs::read(dirs[0].join(&name)).expect("read");
            files += 1;
            for d in &dirs[1..] {
                identical &= std::fs::read(d.join(&name)).ok().as_ref() == Some(&first);
            }
        }
    }
    outcome(
        identical && files > 0,
        format!("{files} files compared over two runs at 4 threads and one at 1 thread"),
    )
}

fn main() {
    let optimal = optimal_run();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("value identity", Box::new(|| value_identity(&optimal))),
        ("flow identities", Box::new(|| flow_identities(&optimal))),
        ("threshold regularity", Box::new(threshold_regularity)),
        ("Ito checker", Box::new(ito_checker)),
        ("monotonicity suite", Box::new(monotonicity_suite)),
        ("obstacle PDE", Box::new(obstacle_pde)),
        ("convex dual", Box::new(convex_dual)),
        ("DPP check", Box::new(dpp)),
        ("epsilon-optimal construction", Box::new(epsilon_optimal)),
        ("optimality audit", Box::new(|| audit(&optimal))),
        ("determinism", Box::new(determinism)),
    ];
    let mut passed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        passed += usize::from(o.pass);
        println!(
            "[{}] {:>2} {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{passed}/{} criteria passed", criteria.len());
}
