//! Numerical Ito formula for flows of stopped laws.
//!
//! Along a simulated flow the change `u(T, m_{T-}) - u(0, m_{0-})` is split
//! into the generator integral, the jumps of the flow at scheduled mass
//! stops, and the first-order effect `E int D_I u dI` of individual stops.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{
    CylindricalFunctional, MeasureFunctional, Outer, RandomizedStopRule, ScalarTestFunction,
    SplitMode, StoppedEnsemble,
};
use crate::sim::{
    simulate_observed, FlowObserver, MeasureFlow, ModelSpec, SimConfig, StepView, StoppingPolicy,
};

/// The terms of the Ito decomposition on one flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoDecomposition {
    pub lhs: f64,
    pub drift_term: f64,
    pub jump_flow_term: f64,
    pub jump_individual_term: f64,
    pub residual: f64,
}

impl ItoDecomposition {
    pub fn from_terms(
        lhs: f64,
        drift_term: f64,
        jump_flow_term: f64,
        jump_individual_term: f64,
    ) -> Self {
        Self {
            lhs,
            drift_term,
            jump_flow_term,
            jump_individual_term,
            residual: lhs - (drift_term + jump_flow_term + jump_individual_term),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.lhs,
            self.drift_term,
            self.jump_flow_term,
            self.jump_individual_term,
            self.residual,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Accumulates the decomposition step by step; usable as a simulation
/// observer so that large flows need not be stored.
pub struct ItoAccumulator<'a> {
    u: &'a dyn MeasureFunctional,
    model: &'a ModelSpec,
    start: Option<f64>,
    end: Option<f64>,
    drift: f64,
    jump_flow: f64,
    jump_individual: f64,
    /// `(step, u(m_s) - u(m_{s-}))` at every flow jump.
    pub jumps: Vec<(usize, f64)>,
}

impl<'a> ItoAccumulator<'a> {
    pub fn new(u: &'a dyn MeasureFunctional, model: &'a ModelSpec) -> Self {
        Self {
            u,
            model,
            start: None,
            end: None,
            drift: 0.0,
            jump_flow: 0.0,
            jump_individual: 0.0,
            jumps: Vec::new(),
        }
    }

    pub fn finish(&self) -> Result<ItoDecomposition> {
        match (self.start, self.end) {
            (Some(a), Some(b)) => Ok(ItoDecomposition::from_terms(
                b - a,
                self.drift,
                self.jump_flow,
                self.jump_individual,
            )),
            _ => Err(Error::MissingData(
                "flow endpoints were not observed".into(),
            )),
        }
    }
}

impl FlowObserver for ItoAccumulator<'_> {
    fn observe(&mut self, v: &StepView<'_>) -> Result<()> {
        let endpoint =
            |what: &str| Error::MissingData(format!("{what} snapshot missing at step {}", v.step));
        if v.step == 0 {
            self.start = Some(
                self.u
                    .evaluate(v.t, v.pre.ok_or_else(|| endpoint("initial"))?),
            );
        }
        if v.is_last() {
            self.end = Some(
                self.u
                    .evaluate(v.t, v.pre.ok_or_else(|| endpoint("terminal"))?),
            );
            return Ok(());
        }
        if v.is_jump {
            let pre = v.pre.ok_or_else(|| endpoint("pre-jump"))?;
            let jump = self.u.evaluate(v.t, v.after_jump()) - self.u.evaluate(v.t, pre);
            self.jumps.push((v.step, jump));
            self.jump_flow += jump;
        }
        let lin = self.u.linearize(v.t, v.post);
        for &k in v.newly_stopped {
            self.jump_individual -= v.post.weight(k) * lin.d_i(v.post.position(k));
        }
        self.drift += self
            .model
            .generator_value(lin.as_ref(), v.t, v.post, v.stats)
            * v.dt;
        Ok(())
    }
}

/// Decomposes `u` along a flow stored with full snapshots.
pub fn ito_decompose(
    u: &dyn MeasureFunctional,
    flow: &MeasureFlow,
    model: &ModelSpec,
) -> Result<ItoDecomposition> {
    let mut acc = ItoAccumulator::new(u, model);
    flow.replay(&mut acc)?;
    acc.finish()
}

/// Reference functionals `m[psi]`, `m[psi]^2` with `psi = e^{-x^2/2} i`, and
/// `(2 - t) exp(m[cos(x) i + (1 - i) / 2])`.
pub fn reference_functionals() -> Vec<CylindricalFunctional> {
    vec![
        CylindricalFunctional::new(ScalarTestFunction::gaussian_alive(), Outer::linear(1.0)),
        CylindricalFunctional::new(ScalarTestFunction::gaussian_alive(), Outer::square()),
        CylindricalFunctional::new(ScalarTestFunction::cosine_alive(), Outer::decaying_exp(2.0)),
    ]
}

/// Mean absolute residual of every functional at one refinement level.
#[derive(Debug, Clone, Serialize)]
pub struct RefinementLevel {
    pub n_steps: usize,
    pub dt: f64,
    pub n_particles: usize,
    /// Indexed by functional.
    pub mean_abs_residual: Vec<f64>,
    /// `[functional][seed]` decompositions.
    #[serde(skip)]
    pub decompositions: Vec<Vec<ItoDecomposition>>,
}

/// Residuals under joint refinement of `dt` and `1 / N`.
#[derive(Debug, Clone, Serialize)]
pub struct RefinementReport {
    pub levels: Vec<RefinementLevel>,
    /// Per functional, the mean over consecutive levels of
    /// `residual(level) / residual(level + 1)`.
    pub mean_ratio: Vec<f64>,
}

/// Runs every `(n_steps, n_particles)` level once per seed, decomposing all
/// functionals on each flow.
pub fn refinement_study(
    functionals: &[&dyn MeasureFunctional],
    model: &ModelSpec,
    policy: &StoppingPolicy,
    m0: &StoppedEnsemble,
    horizon: f64,
    levels: &[(usize, usize)],
    seeds: &[u64],
) -> Result<RefinementReport> {
    let mut out = Vec::with_capacity(levels.len());
    for &(n_steps, n_particles) in levels {
        let mut decs = vec![Vec::with_capacity(seeds.len()); functionals.len()];
        for &seed in seeds {
            let mut accs: Vec<ItoAccumulator> = functionals
                .iter()
                .map(|u| ItoAccumulator::new(*u, model))
                .collect();
            {
                let mut obs: Vec<&mut dyn FlowObserver> = accs
                    .iter_mut()
                    .map(|a| a as &mut dyn FlowObserver)
                    .collect();
                let cfg = SimConfig::new(horizon, n_particles, n_steps, seed).with_groups(0);
                simulate_observed(model, policy, m0, cfg, &mut obs)?;
            }
            for (d, a) in decs.iter_mut().zip(&accs) {
                d.push(a.finish()?);
            }
        }
        let mean_abs_residual = decs
            .iter()
            .map(|d| d.iter().map(|x| x.residual.abs()).sum::<f64>() / d.len() as f64)
            .collect();
        out.push(RefinementLevel {
            n_steps,
            dt: horizon / n_steps as f64,
            n_particles,
            mean_abs_residual,
            decompositions: decs,
        });
    }
    let mean_ratio = (0..functionals.len())
        .map(|f| {
            let ratios: Vec<f64> = out
                .windows(2)
                .map(|w| w[0].mean_abs_residual[f] / w[1].mean_abs_residual[f])
                .collect();
            ratios.iter().sum::<f64>() / ratios.len().max(1) as f64
        })
        .collect();
    Ok(RefinementReport {
        levels: out,
        mean_ratio,
    })
}

/// One probe of the monotonicity lemma.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeRecord {
    /// Minimum of `D_I u(t, m, x)` over the particles of `m`.
    pub min_d_i: f64,
    /// `u(t, m') - u(t, m)` with `m'` the stopped law.
    pub change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub records: Vec<ProbeRecord>,
    /// Samples where `D_I u >= 0` on the support yet stopping increased `u`.
    pub violations: Vec<usize>,
}

/// Checks that stopping never increases `u` where `D_I u >= 0`.
pub fn monotonicity_probe(
    u: &dyn MeasureFunctional,
    t: f64,
    samples: &[(StoppedEnsemble, RandomizedStopRule)],
) -> Result<MonotonicityReport> {
    if samples.is_empty() {
        return Err(Error::Input(
            "monotonicity probe needs at least one sample".into(),
        ));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut violations = Vec::new();
    for (k, (m, rule)) in samples.iter().enumerate() {
        let lin = u.linearize(t, m);
        let min_d_i = m
            .particles()
            .map(|(x, _, _)| lin.d_i(x))
            .fold(f64::INFINITY, f64::min);
        let stopped = m.apply_randomized_stop(rule, SplitMode::WeightSplit)?;
        let before = lin.value();
        let change = u.evaluate(t, &stopped) - before;
        if min_d_i >= 0.0 && change > 1e-12 * (1.0 + before.abs()) {
            violations.push(k);
        }
        records.push(ProbeRecord { min_d_i, change });
    }
    Ok(MonotonicityReport {
        records,
        violations,
    })
}

/// Searches indicator rules `1{x <= c}`, `1{x > c}` and stop-all for one
/// that strictly increases `u`; returns the best such rule and its gain.
pub fn find_increasing_stop(
    u: &dyn MeasureFunctional,
    t: f64,
    m: &StoppedEnsemble,
) -> Result<Option<(RandomizedStopRule, f64)>> {
    let base = u.evaluate(t, m);
    let mut cuts: Vec<f64> = m.particles().map(|(x, _, _)| x[0]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut rules = vec![RandomizedStopRule::Constant(0.0)];
    for c in cuts {
        rules.push(RandomizedStopRule::Threshold {
            threshold: c,
            keep_below: true,
        });
        rules.push(RandomizedStopRule::Threshold {
            threshold: c,
            keep_below: false,
        });
    }
    let mut best: Option<(RandomizedStopRule, f64)> = None;
    for rule in rules {
        let gain = u.evaluate(t, &m.apply_randomized_stop(&rule, SplitMode::WeightSplit)?) - base;
        if gain > 1e-12 * (1.0 + base.abs()) && best.as_ref().is_none_or(|b| gain > b.1) {
            best = Some((rule, gain));
        }
    }
    Ok(best)
}
