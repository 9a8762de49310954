//! Scenario pipelines. Every kind validates its inputs before any
//! computation and returns its artifacts in memory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use meanstop_core::dp::{AuditReport, OptimalityAuditor};
use meanstop_core::dual::{
    dual_value, optimal_policy_for_dual, DecoupledModel, DualCriterion, MeanVariance,
};
use meanstop_core::ito::{
    reference_functionals, refinement_study, ItoAccumulator, ItoDecomposition, RefinementReport,
};
use meanstop_core::measure::{
    MeasureFunctional, RandomizedStopRule, ScalarTestFunction, StoppedEnsemble,
};
use meanstop_core::obstacle::{
    dpp_check, payoff_model, pure_region_policy, solve_obstacle, DppReport, ObstacleGrid,
    ObstacleSettings, Payoff, ScalarField,
};
use meanstop_core::sim::{
    objective, simulate, simulate_observed, FlowObserver, MeasureStats, ModelSpec,
    ObjectiveEstimate, SimConfig, SnapshotMode, StoppingPolicy,
};
use meanstop_core::smooth::{kappa0, InitialDensity, SmoothInstance, HORIZON};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::expr::{Expr, Var, Vars};
use crate::scenario::{
    DualBlock, DualPreset, InitialLaw, Kind, ModelBlock, ModelPreset, PolicyBlock, RuleSpec,
    Scenario, Statistic, Variant,
};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] meanstop_core::Error),
    #[error("cannot write outputs: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, RunError> {
    Err(RunError::Validation(msg.into()))
}

fn bad_input(e: meanstop_core::Error) -> RunError {
    RunError::Validation(e.to_string())
}

/// Command-line values that replace the scenario's.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub alpha_range: Option<(f64, f64, usize)>,
}

/// A named output file.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn json<T: Serialize>(name: &str, value: &T) -> Self {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable report");
        bytes.push(b'\n');
        Self {
            name: name.into(),
            bytes,
        }
    }

    fn csv(
        name: &str,
        header: &[&str],
        rows: impl Iterator<Item = Vec<f64>>,
    ) -> Result<Self, RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(std::io::Error::other)?;
        for row in rows {
            w.write_record(row.iter().map(|v| format!("{v:.16e}")))
                .map_err(std::io::Error::other)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(Self {
            name: name.into(),
            bytes,
        })
    }

    fn with<F: FnOnce(&mut Vec<u8>) -> meanstop_core::Result<()>>(
        name: &str,
        f: F,
    ) -> Result<Self, RunError> {
        let mut bytes = Vec::new();
        f(&mut bytes)?;
        Ok(Self {
            name: name.into(),
            bytes,
        })
    }
}

/// Scenario plus command-line overrides, resolved against the scenario's
/// directory.
pub struct Context<'a> {
    pub kind: Kind,
    pub scenario: &'a Scenario,
    pub base_dir: PathBuf,
    pub overrides: &'a Overrides,
}

impl Context<'_> {
    pub fn seed(&self) -> Result<u64, RunError> {
        match self.overrides.seed.or(self.scenario.seed) {
            Some(s) => Ok(s),
            None => invalid(format!("kind {} needs a seed", self.kind.name())),
        }
    }

    fn particles(&self, default: usize) -> Result<usize, RunError> {
        let n = self
            .overrides
            .particles
            .or(self.scenario.numerics.particles)
            .unwrap_or(default);
        if n == 0 {
            return invalid("particles must be positive");
        }
        Ok(n)
    }

    fn steps(&self, default: usize) -> Result<usize, RunError> {
        let n = self
            .overrides
            .steps
            .or(self.scenario.numerics.steps)
            .unwrap_or(default);
        if n == 0 {
            return invalid("steps must be positive");
        }
        Ok(n)
    }

    fn horizon(&self, default: f64) -> Result<f64, RunError> {
        let t = self.scenario.numerics.horizon.unwrap_or(default);
        if !(t > 0.0 && t.is_finite()) {
            return invalid(format!("horizon must be positive, got {t}"));
        }
        Ok(t)
    }

    fn tol(&self, default: f64) -> Result<f64, RunError> {
        let tol = self.scenario.numerics.tol.unwrap_or(default);
        if !(tol > 0.0) {
            return invalid(format!("tol must be positive, got {tol}"));
        }
        Ok(tol)
    }

    fn sim_config(
        &self,
        horizon: f64,
        particles: usize,
        steps: usize,
    ) -> Result<SimConfig, RunError> {
        let mut cfg = SimConfig::new(
            horizon,
            self.particles(particles)?,
            self.steps(steps)?,
            self.seed()?,
        );
        if let Some(g) = self.scenario.numerics.groups {
            cfg = cfg.with_groups(g);
        }
        if self.scenario.numerics.paths == Some(true) {
            cfg = cfg.with_paths();
        }
        Ok(cfg)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    fn model_block(&self) -> ModelBlock {
        self.scenario.model.clone().unwrap_or_default()
    }

    fn initial(&self) -> Result<StoppedEnsemble, RunError> {
        let law = self
            .scenario
            .initial
            .clone()
            .unwrap_or(InitialLaw::Dirac(0.0));
        match law {
            InitialLaw::Dirac(x) => Ok(StoppedEnsemble::dirac(&[x], true)),
            InitialLaw::Atoms(xs) => StoppedEnsemble::uniform_1d(&xs, true).map_err(bad_input),
            InitialLaw::Normal(q) => {
                if !(q.sd > 0.0) || q.atoms == 0 {
                    return invalid("normal initial law needs sd > 0 and atoms > 0");
                }
                let normal =
                    Normal::new(q.mean, q.sd).map_err(|e| RunError::Validation(e.to_string()))?;
                let xs: Vec<f64> = (0..q.atoms)
                    .map(|k| normal.inverse_cdf((k as f64 + 0.5) / q.atoms as f64))
                    .collect();
                StoppedEnsemble::uniform_1d(&xs, true).map_err(bad_input)
            }
            InitialLaw::Csv(rel) => {
                let path = self.path(&rel);
                let file = std::fs::File::open(&path).map_err(|e| {
                    RunError::Validation(format!("cannot read {}: {e}", path.display()))
                })?;
                StoppedEnsemble::read_csv(file).map_err(bad_input)
            }
        }
    }
}

fn vars(t: f64, x: f64, s: &MeasureStats) -> Vars {
    Vars {
        t,
        x,
        m1: s.mean,
        s1: s.survival_mass,
        v0: s.user,
    }
}

fn statistic(s: Statistic) -> ScalarTestFunction {
    match s {
        Statistic::GaussianAlive => ScalarTestFunction::gaussian_alive(),
        Statistic::CosineAlive => ScalarTestFunction::cosine_alive(),
        Statistic::Survival => ScalarTestFunction::survival(),
    }
}

fn expression_model(block: &ModelBlock) -> Result<ModelSpec, RunError> {
    let exprs = [&block.drift, &block.sigma, &block.running, &block.terminal];
    if block.statistic.is_none()
        && exprs
            .iter()
            .any(|e| e.as_ref().is_some_and(|e| e.uses(Var::V0)))
    {
        return invalid("v0 needs a model statistic");
    }
    let drift = block
        .drift
        .clone()
        .unwrap_or_else(|| Expr::parse("0").expect("constant"));
    let sigma = block
        .sigma
        .clone()
        .unwrap_or_else(|| Expr::parse("1").expect("constant"));
    let mut model = ModelSpec::scalar(
        move |t, x, s| drift.eval_or_nan(&vars(t, x, s)),
        move |t, x, s| sigma.eval_or_nan(&vars(t, x, s)),
    );
    if let Some(s) = block.statistic {
        model = model.with_user_stat(statistic(s));
    }
    if let Some(f) = block.running.clone() {
        model = model.with_integrand(move |t, x, s| f.eval_or_nan(&vars(t, x[0], s)));
    }
    if let Some(g) = block.terminal.clone() {
        let user = block.statistic.map(statistic);
        model = model.with_terminal(move |m: &StoppedEnsemble| {
            let stats = MeasureStats::of(m, user.as_ref().map(|u| u as _));
            m.particles()
                .map(|(x, _, w)| w * g.eval_or_nan(&vars(f64::NAN, x[0], &stats)))
                .sum::<f64>()
        });
    }
    Ok(model)
}

fn has_expressions(block: &ModelBlock) -> bool {
    block.drift.is_some()
        || block.sigma.is_some()
        || block.running.is_some()
        || block.terminal.is_some()
        || block.statistic.is_some()
}

/// `(t, x)` coefficient for the one-dimensional PDE solvers.
fn field(e: Option<&Expr>, default: &str, name: &str) -> Result<ScalarField, RunError> {
    let e = e
        .cloned()
        .unwrap_or_else(|| Expr::parse(default).expect("constant"));
    if [Var::M1, Var::S1, Var::V0].iter().any(|v| e.uses(*v)) {
        return invalid(format!(
            "{name} must depend on t and x only in decoupled kinds"
        ));
    }
    Ok(Arc::new(move |t, x| {
        e.eval_or_nan(&Vars {
            t,
            x,
            ..Vars::default()
        })
    }))
}

/// What a policy block may refer to besides its own fields.
#[derive(Default)]
struct PolicyEnv {
    example53: Option<Arc<SmoothInstance>>,
    obstacle: Option<Arc<ObstacleGrid>>,
}

fn rule(spec: &RuleSpec) -> Result<RandomizedStopRule, RunError> {
    match *spec {
        RuleSpec::Constant(p) => {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("survival probability {p} outside [0, 1]"));
            }
            Ok(RandomizedStopRule::Constant(p))
        }
        RuleSpec::Threshold { at, keep_below } => Ok(RandomizedStopRule::Threshold {
            threshold: at,
            keep_below,
        }),
    }
}

fn policy(block: &PolicyBlock, env: &PolicyEnv) -> Result<StoppingPolicy, RunError> {
    Ok(match block {
        PolicyBlock::Never {} => StoppingPolicy::NeverStop,
        PolicyBlock::StopAll { time } => StoppingPolicy::StopAll { time: *time },
        PolicyBlock::Barrier { t0, c } => StoppingPolicy::Barrier { t0: *t0, c: *c },
        PolicyBlock::Scheduled { stops } => StoppingPolicy::ScheduledMassStop(
            stops
                .iter()
                .map(|s| Ok((s.time, rule(&s.rule)?)))
                .collect::<Result<_, RunError>>()?,
        ),
        PolicyBlock::Region { continue_while } => {
            let e = continue_while.clone();
            StoppingPolicy::region(move |t, x, s| e.eval_or_nan(&vars(t, x[0], s)) > 0.0)
        }
        PolicyBlock::Randomized { survive } => {
            let e = survive.clone();
            StoppingPolicy::randomized(move |t, x, s| {
                e.eval_or_nan(&vars(t, x[0], s)).clamp(0.0, 1.0)
            })
        }
        PolicyBlock::Composite { parts } => StoppingPolicy::Composite(
            parts
                .iter()
                .map(|p| policy(p, env))
                .collect::<Result<_, _>>()?,
        ),
        PolicyBlock::Example53Optimal {} => SmoothInstance::optimal_policy(),
        PolicyBlock::Example53Barrier { c } => SmoothInstance::policy_with_barrier(*c),
        PolicyBlock::Example53Pure {} => match &env.example53 {
            Some(inst) => inst.pure_policy().map_err(bad_input)?,
            None => return invalid("example53_pure needs the pure example53 variant"),
        },
        PolicyBlock::ObstacleRegion {} => match &env.obstacle {
            Some(grid) => pure_region_policy(grid.clone()),
            None => return invalid("obstacle_region is only available in obstacle-based kinds"),
        },
    })
}

fn user_policy(
    ctx: &Context,
    env: &PolicyEnv,
    default: PolicyBlock,
) -> Result<StoppingPolicy, RunError> {
    policy(ctx.scenario.policy.as_ref().unwrap_or(&default), env)
}

/// Model of a kind that simulates: the example53 preset or expressions.
fn simulation_model(ctx: &Context) -> Result<(ModelSpec, PolicyEnv), RunError> {
    let block = ctx.model_block();
    match block.preset {
        Some(ModelPreset::Example53) => {
            if has_expressions(&block) {
                return invalid(
                    "model preset excludes drift, sigma, running, terminal and statistic",
                );
            }
            let inst = SmoothInstance::point_mass();
            Ok((
                inst.model(),
                PolicyEnv {
                    example53: Some(inst),
                    obstacle: None,
                },
            ))
        }
        None => Ok((expression_model(&block)?, PolicyEnv::default())),
    }
}

pub fn execute(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    if let Some(k) = ctx.scenario.kind {
        if k != ctx.kind {
            return invalid(format!(
                "scenario is for {} but {} was requested",
                k.name(),
                ctx.kind.name()
            ));
        }
    }
    if ctx.kind.needs_seed() {
        ctx.seed()?;
    }
    match ctx.kind {
        Kind::Simulate => run_simulate(ctx),
        Kind::ItoCheck => run_ito(ctx),
        Kind::Obstacle => run_obstacle(ctx),
        Kind::Dual => run_dual(ctx),
        Kind::Example53 => run_example53(ctx),
        Kind::DppCheck => run_dpp(ctx),
        Kind::Audit => run_audit(ctx),
    }
}

fn run_simulate(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let (model, env) = simulation_model(ctx)?;
    let m0 = ctx.initial()?;
    let pol = user_policy(ctx, &env, PolicyBlock::Never {})?;
    let cfg = ctx.sim_config(ctx.horizon(1.0)?, 10_000, 1000)?;
    let flow = simulate(&model, &pol, &m0, cfg)?;
    let mut out = vec![
        Artifact::with("stats.csv", |w| flow.write_stats_csv(w))?,
        Artifact::with("final_ensemble.csv", |w| flow.final_state.write_csv(w))?,
    ];
    if flow.paths.is_some() {
        out.push(Artifact::with("paths.csv", |w| flow.write_paths_csv(w))?);
    }
    if model.running.is_some() || model.terminal.is_some() {
        out.push(Artifact::json("objective.json", &objective(&flow, &model)?));
    }
    Ok(out)
}

#[derive(Serialize)]
struct ItoReport {
    functionals: Vec<&'static str>,
    decompositions: Vec<ItoDecomposition>,
    jump_steps: Vec<usize>,
    residual_tol: f64,
    residual_ok: bool,
    refinement: Option<RefinementReport>,
    min_ratio: f64,
    ratio_ok: Option<bool>,
    pass: bool,
}

fn run_ito(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let (model, env) = simulation_model(ctx)?;
    let m0 = ctx.initial()?;
    let pol = user_policy(ctx, &env, PolicyBlock::Never {})?;
    let horizon = ctx.horizon(1.0)?;
    let block = ctx.scenario.ito.clone().unwrap_or_default();
    let residual_tol = block.residual_tol.unwrap_or(0.05);
    let min_ratio = block.min_ratio.unwrap_or(1.3);
    if let Some(levels) = &block.levels {
        if levels.len() < 2 || levels.iter().any(|(s, n)| *s == 0 || *n == 0) {
            return invalid("ito.levels needs at least two levels of positive steps and particles");
        }
    }
    let funcs = reference_functionals();
    let refs: Vec<&dyn MeasureFunctional> =
        funcs.iter().map(|f| f as &dyn MeasureFunctional).collect();
    let cfg = ctx
        .sim_config(horizon, 10_000, 1000)?
        .with_snapshots(SnapshotMode::None);
    let mut accs: Vec<ItoAccumulator> = refs
        .iter()
        .map(|u| ItoAccumulator::new(*u, &model))
        .collect();
    let flow = {
        let mut obs: Vec<&mut dyn FlowObserver> = accs
            .iter_mut()
            .map(|a| a as &mut dyn FlowObserver)
            .collect();
        simulate_observed(&model, &pol, &m0, cfg, &mut obs)?
    };
    let decompositions = accs
        .iter()
        .map(|a| a.finish())
        .collect::<meanstop_core::Result<Vec<_>>>()?;
    let residual_ok = decompositions
        .iter()
        .all(|d| d.residual.abs() <= residual_tol);
    let refinement = match &block.levels {
        Some(levels) => {
            let seed = ctx.seed()?;
            let seeds = block
                .seeds
                .clone()
                .unwrap_or_else(|| (seed..seed + 5).collect());
            Some(refinement_study(
                &refs, &model, &pol, &m0, horizon, levels, &seeds,
            )?)
        }
        None => None,
    };
    let ratio_ok = refinement
        .as_ref()
        .map(|r| r.mean_ratio.iter().all(|q| *q >= min_ratio));
    let report = ItoReport {
        functionals: vec![
            "m[psi]",
            "m[psi]^2",
            "(2 - t) exp(m[cos x i + (1 - i) / 2])",
        ],
        decompositions,
        jump_steps: flow.jump_steps.clone(),
        residual_tol,
        residual_ok,
        refinement,
        min_ratio,
        ratio_ok,
        pass: residual_ok && ratio_ok != Some(false),
    };
    Ok(vec![
        Artifact::with("stats.csv", |w| flow.write_stats_csv(w))?,
        Artifact::json("ito_report.json", &report),
    ])
}

struct Decoupled {
    b: ScalarField,
    sigma: ScalarField,
}

fn decoupled(ctx: &Context) -> Result<Decoupled, RunError> {
    let block = ctx.model_block();
    if block.preset.is_some()
        || block.running.is_some()
        || block.terminal.is_some()
        || block.statistic.is_some()
    {
        return invalid("decoupled kinds take drift and sigma only");
    }
    Ok(Decoupled {
        b: field(block.drift.as_ref(), "0", "drift")?,
        sigma: field(block.sigma.as_ref(), "1", "sigma")?,
    })
}

fn settings(
    ctx: &Context,
    dec: &Decoupled,
    m0: &StoppedEnsemble,
    horizon: f64,
    domain: Option<[f64; 2]>,
) -> Result<ObstacleSettings, RunError> {
    let nx = ctx.scenario.numerics.nx.unwrap_or(256);
    let nt = ctx.scenario.numerics.nt.unwrap_or(256);
    Ok(match domain {
        Some([lo, hi]) => {
            if !(lo < hi) {
                return invalid(format!("empty domain [{lo}, {hi}]"));
            }
            ObstacleSettings::new(horizon, lo, hi, nx, nt)
        }
        None => {
            let scale = m0
                .particles()
                .map(|(x, _, _)| (dec.sigma)(0.0, x[0]).abs())
                .fold(0.0, f64::max);
            if !(scale > 0.0 && scale.is_finite()) {
                return invalid("cannot size the domain from sigma; set a domain");
            }
            ObstacleSettings::around(m0, scale, horizon, nx, nt)
        }
    })
}

fn payoff(ctx: &Context) -> Result<(Payoff, Option<[f64; 2]>, Option<Vec<f64>>), RunError> {
    let Some(block) = ctx.scenario.obstacle.clone() else {
        return invalid(format!("kind {} needs an obstacle block", ctx.kind.name()));
    };
    let payoff = match (&block.payoff, &block.payoff_csv) {
        (Some(e), None) => {
            if [Var::T, Var::M1, Var::S1, Var::V0]
                .iter()
                .any(|v| e.uses(*v))
            {
                return invalid("payoff must depend on x only");
            }
            let e = e.clone();
            Payoff::function(move |x| e.at_x(x).unwrap_or(f64::NAN))
        }
        (None, Some(rel)) => {
            let path = ctx.path(rel);
            let file = std::fs::File::open(&path).map_err(|e| {
                RunError::Validation(format!("cannot read {}: {e}", path.display()))
            })?;
            Payoff::read_csv(file).map_err(bad_input)?
        }
        _ => return invalid("obstacle block needs exactly one of payoff and payoff_csv"),
    };
    Ok((payoff, block.domain, block.s))
}

#[derive(Serialize)]
struct ObstacleSummary {
    horizon: f64,
    domain: (f64, f64),
    nx: usize,
    nt: usize,
    complementarity: f64,
    warnings: Vec<String>,
    /// Lift of the initial law at `t = 0`.
    lift_initial: f64,
}

fn run_obstacle(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let dec = decoupled(ctx)?;
    let (payoff, domain, _) = payoff(ctx)?;
    let m0 = ctx.initial()?;
    let horizon = ctx.horizon(1.0)?;
    let set = settings(ctx, &dec, &m0, horizon, domain)?;
    let grid = solve_obstacle(dec.b.as_ref(), dec.sigma.as_ref(), &payoff, &set)?;
    let summary = ObstacleSummary {
        horizon,
        domain: grid.domain(),
        nx: set.nx,
        nt: set.nt,
        complementarity: grid.complementarity,
        warnings: grid.warnings.clone(),
        lift_initial: grid.lift_value(0.0, &m0)?,
    };
    Ok(vec![
        Artifact::with("grid.csv", |w| grid.write_csv(w))?,
        Artifact::json("obstacle.json", &summary),
    ])
}

fn criterion(block: &DualBlock) -> Result<DualCriterion, RunError> {
    let exprs = [&block.psi, &block.h, &block.phi, &block.conjugate];
    if exprs.iter().flat_map(|e| e.iter()).any(|e| {
        [Var::T, Var::M1, Var::S1, Var::V0]
            .iter()
            .any(|v| e.uses(*v))
    }) {
        return invalid("dual expressions take their argument as x only");
    }
    let crit = match block.preset {
        Some(p) => {
            if exprs.iter().any(|e| e.is_some()) {
                return invalid("dual preset excludes psi, h, phi and conjugate");
            }
            DualCriterion::mean_variance(match p {
                DualPreset::MeanVariance => MeanVariance::Standard,
                DualPreset::MeanVarianceSquaredMean => MeanVariance::SquaredMean,
            })
        }
        None => {
            let (Some(psi), Some(h), Some(phi)) =
                (block.psi.clone(), block.h.clone(), block.phi.clone())
            else {
                return invalid("dual block needs a preset or all of psi, h and phi");
            };
            let crit = DualCriterion::new(
                move |x| psi.at_x(x).unwrap_or(f64::NAN),
                move |x| h.at_x(x).unwrap_or(f64::NAN),
                move |x| phi.at_x(x).unwrap_or(f64::NAN),
            );
            match block.conjugate.clone() {
                Some(c) => crit.with_conjugate(move |a| c.at_x(a).unwrap_or(f64::NAN)),
                None => crit,
            }
        }
    };
    Ok(crit)
}

#[derive(Serialize)]
struct DualReport {
    value: f64,
    alpha_star: f64,
    per_alpha: Vec<meanstop_core::dual::AlphaSlice>,
    policy_objective: Option<ObjectiveEstimate>,
}

fn run_dual(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let Some(block) = ctx.scenario.dual.clone() else {
        return invalid("kind dual needs a dual block");
    };
    let mut crit = criterion(&block)?;
    if let Some((lo, hi, n)) = ctx.overrides.alpha_range.or(block.alpha_range) {
        if !(lo < hi) || n < 3 {
            return invalid(format!(
                "alpha range {lo}:{hi}:{n} needs lo < hi and at least 3 points"
            ));
        }
        crit = crit.with_alpha_grid(lo, hi, n);
    }
    let dec = decoupled(ctx)?;
    let m0 = ctx.initial()?;
    let horizon = ctx.horizon(1.0)?;
    let set = settings(ctx, &dec, &m0, horizon, block.domain)?;
    let cfg = if block.simulate_policy {
        Some(ctx.sim_config(horizon, 10_000, 1000)?)
    } else {
        None
    };
    let (b, sigma) = (dec.b.clone(), dec.sigma.clone());
    let model = DecoupledModel { b, sigma };
    let r = dual_value(&crit, &model, 0.0, &m0, &set)?;
    let policy_objective = match cfg {
        Some(cfg) => {
            let pol = optimal_policy_for_dual(&crit, &model, &set, r.alpha_star)?;
            let spec = model.with_criterion(&crit);
            Some(objective(&simulate(&spec, &pol, &m0, cfg)?, &spec)?)
        }
        None => None,
    };
    let report = DualReport {
        value: r.value,
        alpha_star: r.alpha_star,
        per_alpha: r.per_alpha,
        policy_objective,
    };
    Ok(vec![Artifact::json("dual.json", &report)])
}

/// `t -> (a(t), v0 - a)` checks along a simulated example53 flow.
#[derive(Debug, Clone, Serialize)]
pub struct FlowChecks {
    /// Mass stopped at `t = 0`.
    pub massive_stop_mass: f64,
    /// Largest `|v0 - a|` over 20 times in `[1.05, 1.95]`.
    pub max_late_gap: f64,
    /// Largest `|v0 - kappa0(t, 0) / 2| / stderr` over grid times in `(0, 1]`.
    pub max_early_z: Option<f64>,
}

#[derive(Serialize)]
struct Verdict {
    variant: Variant,
    value: f64,
    stderr: f64,
    predicted_value: f64,
    flow: FlowChecks,
    audit: AuditReport,
    pass: bool,
}

fn example53_setup(
    ctx: &Context,
    variant: Variant,
    particles: usize,
) -> Result<(Arc<SmoothInstance>, StoppedEnsemble, usize), RunError> {
    let block = ctx.model_block();
    if has_expressions(&block) {
        return invalid("example53 kinds use the built-in model");
    }
    if ctx.scenario.numerics.horizon.is_some_and(|t| t != HORIZON) {
        return invalid(format!("example53 has horizon {HORIZON}"));
    }
    let n = ctx.particles(particles)?;
    Ok(match variant {
        Variant::Optimal => (
            SmoothInstance::point_mass(),
            SmoothInstance::initial_law(),
            n,
        ),
        Variant::Pure => {
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            let xs: Vec<f64> = (0..n)
                .map(|k| normal.inverse_cdf((k as f64 + 0.5) / n as f64))
                .collect();
            let m0 = StoppedEnsemble::uniform_1d(&xs, true).map_err(bad_input)?;
            (
                SmoothInstance::with_density(InitialDensity::standard_normal()),
                m0,
                n,
            )
        }
    })
}

/// Flow identities of the explicit instance along a flow of `n` particles.
/// The early-phase statistic is only checked for the point-mass variant,
/// whose survivors after the half stop carry weight `1 / 2n` each.
pub fn flow_checks(
    inst: &SmoothInstance,
    flow: &meanstop_core::MeasureFlow,
    n: usize,
    early: bool,
) -> FlowChecks {
    let massive_stop_mass = 1.0 - flow.stats_post[0].survival_mass;
    let max_late_gap = (0..20)
        .map(|j| {
            let t = 1.05 + 0.9 * j as f64 / 19.0;
            let k = (t / flow.dt).round() as usize;
            (flow.stats_post[k].user - inst.threshold(flow.grid[k])).abs()
        })
        .fold(0.0, f64::max);
    let max_early_z = early.then(|| {
        let mut z = 0.0f64;
        for (k, t) in flow
            .grid
            .iter()
            .enumerate()
            .skip(1)
            .take_while(|(_, t)| **t <= 1.0 + 1e-12)
        {
            let mean = kappa0(*t, 0.0);
            // E[psi(W_t)^2] = 1 / sqrt(1 + 2t)
            let var = (1.0 / (1.0 + 2.0 * t).sqrt() - mean * mean).max(0.0);
            let stderr = 0.5 * (var / n as f64).sqrt();
            z = z.max((flow.stats_post[k].user - 0.5 * mean).abs() / stderr);
        }
        z
    });
    FlowChecks {
        massive_stop_mass,
        max_late_gap,
        max_early_z,
    }
}

fn run_example53(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let block = ctx.scenario.example53.clone().unwrap_or_default();
    let (inst, m0, n) = example53_setup(ctx, block.variant, 100_000)?;
    let env = PolicyEnv {
        example53: Some(inst.clone()),
        obstacle: None,
    };
    let default = match block.variant {
        Variant::Optimal => PolicyBlock::Example53Optimal {},
        Variant::Pure => PolicyBlock::Example53Pure {},
    };
    let pol = user_policy(ctx, &env, default)?;
    let points = block.curve_points.unwrap_or(201);
    if points < 2 {
        return invalid("curve_points must be at least 2");
    }
    let tol = block.audit_tol.unwrap_or(0.02);
    let model = inst.model();
    let cfg = ctx.sim_config(HORIZON, n, 4000)?;
    let mut auditor = OptimalityAuditor::new(inst.as_ref(), tol);
    let flow = simulate_observed(&model, &pol, &m0, cfg, &mut [&mut auditor])?;
    let audit = auditor.report();
    let est = objective(&flow, &model)?;
    let checks = flow_checks(&inst, &flow, n, block.variant == Variant::Optimal);
    let curve = Artifact::csv(
        "a_curve.csv",
        &["t", "a", "half_kappa0"],
        (0..points).map(|j| {
            let t = HORIZON * j as f64 / (points - 1) as f64;
            vec![t, inst.threshold(t), 0.5 * kappa0(t, 0.0)]
        }),
    )?;
    let flow_csv = Artifact::csv(
        "flow.csv",
        &["t", "survival_mass", "v0", "a"],
        flow.grid
            .iter()
            .zip(&flow.stats_post)
            .map(|(t, s)| vec![*t, s.survival_mass, s.user, inst.threshold(*t)]),
    )?;
    let verdict = Verdict {
        variant: block.variant,
        value: est.value,
        stderr: est.stderr,
        predicted_value: inst.u0(0.0, &m0),
        flow: checks,
        pass: audit.pass,
        audit,
    };
    Ok(vec![
        curve,
        flow_csv,
        Artifact::json("verdict.json", &verdict),
    ])
}

#[derive(Serialize)]
struct DppSummary {
    reports: Vec<DppReport>,
    /// Grid error allowance added to three combined standard errors.
    grid_tol: f64,
    pass: bool,
}

fn run_dpp(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let dec = decoupled(ctx)?;
    let (payoff, domain, s) = payoff(ctx)?;
    let m0 = ctx.initial()?;
    let horizon = ctx.horizon(1.0)?;
    let times = s.unwrap_or_else(|| vec![0.25 * horizon, 0.5 * horizon]);
    if times.iter().any(|s| !(*s > 0.0 && *s < horizon)) {
        return invalid("dpp times must lie strictly inside (0, T)");
    }
    let set = settings(ctx, &dec, &m0, horizon, domain)?;
    let cfg = ctx.sim_config(horizon, 40_000, 1000)?;
    let grid_tol = ctx.tol(1e-2)?;
    let grid = Arc::new(solve_obstacle(
        dec.b.as_ref(),
        dec.sigma.as_ref(),
        &payoff,
        &set,
    )?);
    let model = payoff_model(dec.b.clone(), dec.sigma.clone(), payoff);
    let reports = times
        .iter()
        .map(|s| dpp_check(grid.clone(), &model, &m0, *s, cfg.clone()))
        .collect::<meanstop_core::Result<Vec<_>>>()?;
    let pass = reports.iter().all(|r| {
        let se = (r.one_stage.stderr.powi(2) + r.two_stage_stderr.powi(2)).sqrt();
        (r.one_stage.value - r.two_stage).abs() <= 3.0 * se + grid_tol
    });
    Ok(vec![Artifact::json(
        "dpp.json",
        &DppSummary {
            reports,
            grid_tol,
            pass,
        },
    )])
}

#[derive(Serialize)]
struct AuditSummary {
    objective: ObjectiveEstimate,
    audit: AuditReport,
}

fn run_audit(ctx: &Context) -> Result<Vec<Artifact>, RunError> {
    let block = ctx.scenario.example53.clone().unwrap_or_default();
    let (inst, m0, n) = example53_setup(ctx, block.variant, 20_000)?;
    let env = PolicyEnv {
        example53: Some(inst.clone()),
        obstacle: None,
    };
    let pol = user_policy(ctx, &env, PolicyBlock::Example53Optimal {})?;
    let tol = ctx.tol(block.audit_tol.unwrap_or(0.02))?;
    let model = inst.model();
    let cfg = ctx.sim_config(HORIZON, n, 4000)?;
    let mut auditor = OptimalityAuditor::new(inst.as_ref(), tol);
    let flow = simulate_observed(&model, &pol, &m0, cfg, &mut [&mut auditor])?;
    let summary = AuditSummary {
        objective: objective(&flow, &model)?,
        audit: auditor.report(),
    };
    Ok(vec![Artifact::json("audit.json", &summary)])
}

/// Directory of the scenario file, for resolving relative paths.
pub fn base_dir(scenario: &Path) -> PathBuf {
    scenario.parent().map(Path::to_path_buf).unwrap_or_default()
}
