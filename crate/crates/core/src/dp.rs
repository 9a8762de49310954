//! Dynamic programming on the space of stopped laws.
//!
//! A candidate value `u` is checked against the obstacle equation
//! `min over C_u(t, m) of -(L u + F)(t, m') = 0`, `u(T, .) = g`, where
//! `C_u(t, m)` holds the stopped laws `m' <= m` with `u(t, m') = u(t, m)`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{MeasureFunctional, RandomizedStopRule, SplitMode, StoppedEnsemble};
use crate::sim::{
    FlowObserver, MeasureFlow, ModelSpec, SimConfig, Simulation, StepView, StoppingPolicy,
};
use crate::smooth::{psi, SmoothInstance, HORIZON};

/// Default tolerance for candidates known in closed form.
pub const ANALYTIC_TOL: f64 = 1e-8;

/// Default tolerance for Monte Carlo quantities on `n` particles.
pub fn mc_tolerance(n: usize) -> f64 {
    10.0 / (n as f64).sqrt()
}

/// A candidate solution of the obstacle equation.
pub trait Candidate: Send + Sync {
    fn horizon(&self) -> f64;

    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64;

    /// `-(L u + F)(t, m)`.
    fn residual(&self, t: f64, m: &StoppedEnsemble) -> f64;

    /// `D_I u(t, m, x)` at the particles `indices` of `m`.
    fn d_i(&self, t: f64, m: &StoppedEnsemble, indices: &[usize]) -> Vec<f64>;

    /// `g(m)`.
    fn terminal(&self, m: &StoppedEnsemble) -> f64;

    /// `|u(T, m) - g(m)|`.
    fn boundary_gap(&self, m: &StoppedEnsemble) -> f64 {
        (self.value(self.horizon(), m) - self.terminal(m)).abs()
    }
}

/// A measure functional together with the model supplying `b`, `sigma`,
/// `F` and `g`.
#[derive(Clone)]
pub struct CandidateValue {
    pub u: Arc<dyn MeasureFunctional>,
    pub model: ModelSpec,
    pub horizon: f64,
}

impl CandidateValue {
    pub fn new<U: MeasureFunctional + 'static>(u: U, model: ModelSpec, horizon: f64) -> Self {
        Self {
            u: Arc::new(u),
            model,
            horizon,
        }
    }
}

impl Candidate for CandidateValue {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.u.evaluate(t, m)
    }

    fn residual(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        residual_lu_f(self.u.as_ref(), &self.model, t, m)
    }

    fn d_i(&self, t: f64, m: &StoppedEnsemble, indices: &[usize]) -> Vec<f64> {
        let lin = self.u.linearize(t, m);
        indices.iter().map(|&k| lin.d_i(m.position(k))).collect()
    }

    fn terminal(&self, m: &StoppedEnsemble) -> f64 {
        self.model.terminal_value(m)
    }
}

/// `u0` of the explicit instance with its closed-form residual.
impl Candidate for SmoothInstance {
    fn horizon(&self) -> f64 {
        HORIZON
    }

    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.u0(t, m)
    }

    fn residual(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        (Self::v0(m) - self.threshold(t)).max(0.0)
    }

    fn d_i(&self, t: f64, m: &StoppedEnsemble, indices: &[usize]) -> Vec<f64> {
        let scale = (HORIZON - t) * self.phi_x(t, Self::v0(m));
        indices
            .iter()
            .map(|&k| scale * psi(m.position(k)[0]))
            .collect()
    }

    fn terminal(&self, _m: &StoppedEnsemble) -> f64 {
        0.0
    }
}

/// `-(L u + F)(t, m)` with `L` built from the model's coefficients.
pub fn residual_lu_f(
    u: &dyn MeasureFunctional,
    model: &ModelSpec,
    t: f64,
    m: &StoppedEnsemble,
) -> f64 {
    let lin = u.linearize(t, m);
    let stats = model.stats(m);
    -(model.generator_value(lin.as_ref(), t, m, &stats) + model.running_value(t, m))
}

/// One-parameter family of stop rules `theta -> p_theta`, `theta` in
/// `[0, 1]`, with `p_0 = 1` and stopping increasing in `theta`.
#[derive(Clone)]
pub struct StopFamily(Arc<dyn Fn(f64) -> RandomizedStopRule + Send + Sync>);

impl StopFamily {
    pub fn new<F: Fn(f64) -> RandomizedStopRule + Send + Sync + 'static>(f: F) -> Self {
        Self(Arc::new(f))
    }

    /// `p_theta = 1 - theta`.
    pub fn constant() -> Self {
        Self::new(|theta| RandomizedStopRule::Constant(1.0 - theta))
    }

    pub fn rule(&self, theta: f64) -> RandomizedStopRule {
        (self.0)(theta)
    }
}

/// Result of a projection onto `C_u(t, m)`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub theta: f64,
    pub rule: RandomizedStopRule,
    pub measure: StoppedEnsemble,
    pub residual: f64,
    pub value_before: f64,
    pub value_after: f64,
}

const BISECTION_WIDTH: f64 = 1e-14;

/// Smallest `theta` whose stopped law has residual at most `tol`, checked
/// to stay on the level set of `u`.
pub fn project_to_cu(
    cand: &dyn Candidate,
    t: f64,
    m: &StoppedEnsemble,
    family: &StopFamily,
    tol: f64,
) -> Result<Projection> {
    let stopped = |theta: f64| -> Result<(RandomizedStopRule, StoppedEnsemble, f64)> {
        let rule = family.rule(theta);
        let m2 = m.apply_randomized_stop(&rule, SplitMode::WeightSplit)?;
        let r = cand.residual(t, &m2);
        Ok((rule, m2, r))
    };
    let before = cand.value(t, m);
    let r0 = cand.residual(t, m);
    if r0 < -tol {
        return Err(Error::ProjectionInfeasible {
            t,
            reason: format!("residual {r0} is negative"),
        });
    }
    if r0 <= tol {
        let rule = family.rule(0.0);
        return Ok(Projection {
            theta: 0.0,
            rule,
            measure: m.clone(),
            residual: r0,
            value_before: before,
            value_after: before,
        });
    }
    let (_, _, r1) = stopped(1.0)?;
    if r1 > tol {
        return Err(Error::ProjectionInfeasible {
            t,
            reason: format!("residual {r1} still above {tol} at the end of the family"),
        });
    }
    // Illinois-modified regula falsi on residual - tol, keeping a bracket
    // whose upper end always satisfies the tolerance
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut g_lo, mut g_hi) = (r0 - tol, r1 - tol);
    let mut side = 0i8;
    for _ in 0..200 {
        if hi - lo <= BISECTION_WIDTH {
            break;
        }
        let mut mid = hi - g_hi * (hi - lo) / (g_hi - g_lo);
        if !(mid > lo && mid < hi) {
            mid = 0.5 * (lo + hi);
        }
        let g = stopped(mid)?.2 - tol;
        if g <= 0.0 {
            hi = mid;
            g_hi = g;
            if g >= -1e-3 * tol {
                break;
            }
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        } else {
            lo = mid;
            g_lo = g;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        }
    }
    let (rule, measure, residual) = stopped(hi)?;
    let after = cand.value(t, &measure);
    if (after - before).abs() > tol {
        return Err(Error::LevelSet { t, before, after });
    }
    Ok(Projection {
        theta: hi,
        rule,
        measure,
        residual,
        value_before: before,
        value_after: after,
    })
}

/// The grid construction of an epsilon-optimal policy.
#[derive(Debug, Clone)]
pub struct EpsilonOptimal {
    pub policy: StoppingPolicy,
    pub predicted_value: f64,
    /// `(t_j, theta_j)` for every projection performed.
    pub thetas: Vec<(f64, f64)>,
    /// The flow along which the policy was built.
    pub construction: MeasureFlow,
}

/// Projects the simulated law onto `C_u` at `t_j = j T / n` and lets it
/// diffuse freely in between.
pub fn epsilon_optimal_policy(
    cand: &dyn Candidate,
    model: &ModelSpec,
    m0: &StoppedEnsemble,
    n_intervals: usize,
    family: &StopFamily,
    tol: f64,
    cfg: SimConfig,
) -> Result<EpsilonOptimal> {
    if n_intervals == 0 || cfg.n_steps % n_intervals != 0 {
        return Err(Error::Config(format!(
            "{} steps cannot be split into {n_intervals} equal intervals",
            cfg.n_steps
        )));
    }
    if (cfg.horizon - cand.horizon()).abs() > 1e-12 {
        return Err(Error::Config(
            "simulation horizon differs from the candidate's".into(),
        ));
    }
    let stride = cfg.n_steps / n_intervals;
    let mut sim = Simulation::new(model, &StoppingPolicy::NeverStop, m0, cfg)?;
    let predicted_value = cand.value(0.0, sim.state());
    let mut schedule = Vec::new();
    let mut thetas = Vec::new();
    while !sim.is_finished() {
        let k = sim.current_step();
        let t = sim.current_time();
        let extra = if k % stride == 0 && k < sim.config().n_steps {
            let p = project_to_cu(cand, t, sim.state(), family, tol)?;
            thetas.push((t, p.theta));
            (p.theta > 0.0).then_some(p.rule)
        } else {
            None
        };
        if let Some(rule) = &extra {
            schedule.push((t, rule.clone()));
        }
        sim.step_with(extra.as_ref(), &mut [])?;
    }
    let policy = if schedule.is_empty() {
        StoppingPolicy::NeverStop
    } else {
        StoppingPolicy::ScheduledMassStop(schedule)
    };
    Ok(EpsilonOptimal {
        policy,
        predicted_value,
        thetas,
        construction: sim.into_flow(),
    })
}

/// Statistics of the optimality conditions along a flow.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AuditReport {
    /// Maximum of `|-(L u + F)(t_k, m_{t_k})|` over the grid before `T`.
    pub max_residual: f64,
    /// Maximum of `|u(s, m_s) - u(s, m_{s-})|` over flow jumps.
    pub max_jump: f64,
    /// Weighted mean of `|D_I u|` over individually stopped particles.
    pub mean_abs_d_i: f64,
    /// Mass stopped individually before `T`.
    pub individually_stopped_mass: f64,
    pub tol: f64,
    pub residual_ok: bool,
    pub jump_ok: bool,
    pub d_i_ok: bool,
    pub pass: bool,
}

/// Streaming form of [`optimality_audit`].
pub struct OptimalityAuditor<'a> {
    cand: &'a dyn Candidate,
    tol: f64,
    max_residual: f64,
    max_jump: f64,
    d_i_mass: f64,
    stopped_mass: f64,
}

impl<'a> OptimalityAuditor<'a> {
    pub fn new(cand: &'a dyn Candidate, tol: f64) -> Self {
        Self {
            cand,
            tol,
            max_residual: 0.0,
            max_jump: 0.0,
            d_i_mass: 0.0,
            stopped_mass: 0.0,
        }
    }

    pub fn report(&self) -> AuditReport {
        let mean_abs_d_i = if self.stopped_mass > 0.0 {
            self.d_i_mass / self.stopped_mass
        } else {
            0.0
        };
        let residual_ok = self.max_residual <= self.tol;
        let jump_ok = self.max_jump <= self.tol;
        let d_i_ok = mean_abs_d_i <= self.tol;
        AuditReport {
            max_residual: self.max_residual,
            max_jump: self.max_jump,
            mean_abs_d_i,
            individually_stopped_mass: self.stopped_mass,
            tol: self.tol,
            residual_ok,
            jump_ok,
            d_i_ok,
            pass: residual_ok && jump_ok && d_i_ok,
        }
    }
}

impl FlowObserver for OptimalityAuditor<'_> {
    fn observe(&mut self, v: &StepView<'_>) -> Result<()> {
        if v.is_last() {
            return Ok(());
        }
        self.max_residual = self.max_residual.max(self.cand.residual(v.t, v.post).abs());
        if v.is_jump {
            let pre = v.pre.ok_or_else(|| {
                Error::MissingData(format!("pre-jump law missing at step {}", v.step))
            })?;
            let jump = self.cand.value(v.t, v.after_jump()) - self.cand.value(v.t, pre);
            self.max_jump = self.max_jump.max(jump.abs());
        }
        if !v.newly_stopped.is_empty() {
            let d = self.cand.d_i(v.t, v.post, v.newly_stopped);
            for (&k, d_i) in v.newly_stopped.iter().zip(d) {
                let w = v.post.weight(k);
                self.d_i_mass += w * d_i.abs();
                self.stopped_mass += w;
            }
        }
        Ok(())
    }
}

/// Audits a flow stored with full snapshots.
pub fn optimality_audit(cand: &dyn Candidate, flow: &MeasureFlow, tol: f64) -> Result<AuditReport> {
    let mut auditor = OptimalityAuditor::new(cand, tol);
    flow.replay(&mut auditor)?;
    Ok(auditor.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{CylindricalFunctional, Outer, ScalarTestFunction};

    #[test]
    fn smooth_residual_at_origin() {
        let inst = SmoothInstance::point_mass();
        let m = SmoothInstance::initial_law();
        assert!((inst.residual(0.0, &m) - 0.5).abs() < 1e-15);
        let half = m
            .apply_randomized_stop(&RandomizedStopRule::Constant(0.5), SplitMode::WeightSplit)
            .unwrap();
        assert_eq!(inst.residual(0.0, &half), 0.0);
    }

    #[test]
    fn projection_finds_half_mass() {
        let inst = SmoothInstance::point_mass();
        let m = SmoothInstance::initial_law();
        let p = project_to_cu(
            inst.as_ref(),
            0.0,
            &m,
            &StopFamily::constant(),
            ANALYTIC_TOL,
        )
        .unwrap();
        assert!((p.theta - 0.5).abs() < 1e-7, "{}", p.theta);
        assert!((SmoothInstance::v0(&p.measure) - 0.5).abs() < 1e-7);
        assert!((p.value_after - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_identity_without_residual() {
        let inst = SmoothInstance::point_mass();
        let m = StoppedEnsemble::dirac(&[3.0], true);
        let p = project_to_cu(
            inst.as_ref(),
            0.0,
            &m,
            &StopFamily::constant(),
            ANALYTIC_TOL,
        )
        .unwrap();
        assert_eq!(p.theta, 0.0);
        assert_eq!(p.measure, m);
    }

    #[test]
    fn projection_from_partial_survival() {
        // v0 = 0.8 from surviving mass 0.8 at the origin
        let inst = SmoothInstance::point_mass();
        let m = StoppedEnsemble::from_parts(1, vec![0.0, 0.0], vec![true, false], vec![0.8, 0.2])
            .unwrap();
        let p = project_to_cu(
            inst.as_ref(),
            0.0,
            &m,
            &StopFamily::constant(),
            ANALYTIC_TOL,
        )
        .unwrap();
        assert!((p.theta - (1.0 - 0.5 / 0.8)).abs() < 1e-7);
    }

    #[test]
    fn infeasible_family_is_reported() {
        let inst = SmoothInstance::point_mass();
        let m = SmoothInstance::initial_law();
        let weak = StopFamily::new(|theta| RandomizedStopRule::Constant(1.0 - 0.1 * theta));
        let err = project_to_cu(inst.as_ref(), 0.0, &m, &weak, ANALYTIC_TOL).unwrap_err();
        assert!(matches!(err, Error::ProjectionInfeasible { .. }));
    }

    #[test]
    fn level_set_violation_is_reported() {
        // u = -m[i] with residual m[i] - 1/2: stopping to reach the residual changes u
        struct Toy;
        impl Candidate for Toy {
            fn horizon(&self) -> f64 {
                1.0
            }
            fn value(&self, _t: f64, m: &StoppedEnsemble) -> f64 {
                -m.survival_mass()
            }
            fn residual(&self, _t: f64, m: &StoppedEnsemble) -> f64 {
                (m.survival_mass() - 0.5).max(0.0)
            }
            fn d_i(&self, _t: f64, _m: &StoppedEnsemble, idx: &[usize]) -> Vec<f64> {
                vec![-1.0; idx.len()]
            }
            fn terminal(&self, _m: &StoppedEnsemble) -> f64 {
                0.0
            }
        }
        let m = StoppedEnsemble::dirac(&[0.0], true);
        let err = project_to_cu(&Toy, 0.0, &m, &StopFamily::constant(), 1e-6).unwrap_err();
        assert!(matches!(err, Error::LevelSet { .. }), "{err}");
    }

    #[test]
    fn generic_candidate_matches_closed_form() {
        let inst = SmoothInstance::point_mass();
        let generic = CandidateValue::new(inst.functional(), inst.model(), HORIZON);
        let m = StoppedEnsemble::from_parts(
            1,
            vec![-0.7, 0.1, 0.4, 1.9],
            vec![true, true, false, true],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        for t in [0.0, 0.3, 0.9, 1.2, 1.7, 1.99] {
            assert!((generic.residual(t, &m) - inst.residual(t, &m)).abs() < 1e-12);
            assert!((generic.value(t, &m) - inst.value(t, &m)).abs() < 1e-14);
            let a = generic.d_i(t, &m, &[0, 1, 2, 3]);
            let b = inst.d_i(t, &m, &[0, 1, 2, 3]);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn all_dead_measure_has_zero_residual() {
        let inst = SmoothInstance::point_mass();
        let generic = CandidateValue::new(inst.functional(), inst.model(), HORIZON);
        let m = StoppedEnsemble::dirac(&[0.4], false);
        for t in [0.0, 0.5, 1.5] {
            assert!(generic.residual(t, &m).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_candidate_never_stops() {
        let zero = CylindricalFunctional::new(ScalarTestFunction::survival(), Outer::constant(0.0));
        let model = ModelSpec::brownian(0.0, 1.0)
            .with_running(|_: f64, _: &StoppedEnsemble| 0.0)
            .with_terminal(|_: &StoppedEnsemble| 0.0);
        let cand = CandidateValue::new(zero, model.clone(), 1.0);
        let m0 = StoppedEnsemble::dirac(&[0.0], true);
        let out = epsilon_optimal_policy(
            &cand,
            &model,
            &m0,
            4,
            &StopFamily::constant(),
            ANALYTIC_TOL,
            SimConfig::new(1.0, 64, 8, 3),
        )
        .unwrap();
        assert!(matches!(out.policy, StoppingPolicy::NeverStop));
        assert_eq!(out.predicted_value, 0.0);
    }
}
