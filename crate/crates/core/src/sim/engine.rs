use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{RandomizedStopRule, StoppedEnsemble};
use crate::rng::{CounterRng, StreamTag};
use crate::sim::flow::{FlowObserver, MeasureFlow, RewardTrace, Snapshot, SnapshotMode, StepView};
use crate::sim::model::{MeasureStats, ModelSpec, ParticleGroups};
use crate::sim::policy::{CompiledPolicy, ContinuousRule, StoppingPolicy};

/// Default number of particle groups behind Monte Carlo standard errors.
pub const DEFAULT_GROUPS: usize = 20;

/// Particles per rayon task in the Euler step.
const CHUNK: usize = 2048;

/// Discretisation and bookkeeping settings of one simulation.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub horizon: f64,
    pub n_particles: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Groups for batch standard errors; 0 or 1 disables them.
    pub groups: usize,
    pub snapshots: SnapshotMode,
    pub record_paths: bool,
}

impl SimConfig {
    pub fn new(horizon: f64, n_particles: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            horizon,
            n_particles,
            n_steps,
            seed,
            groups: DEFAULT_GROUPS,
            snapshots: SnapshotMode::None,
            record_paths: false,
        }
    }

    pub fn with_snapshots(mut self, mode: SnapshotMode) -> Self {
        self.snapshots = mode;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_paths(mut self) -> Self {
        self.record_paths = true;
        self
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Grid step nearest to `t`.
    pub fn step_of(&self, t: f64) -> usize {
        ((t / self.dt()).round() as usize).min(self.n_steps)
    }
}

/// Equal-weight particle cloud for the simulation: `m0` itself when it
/// already has `n` equal-weight atoms, otherwise `n` i.i.d. draws from it.
pub fn initial_particles(m0: &StoppedEnsemble, n: usize, seed: u64) -> StoppedEnsemble {
    let w0 = m0.weight(0);
    if m0.len() == n && m0.weights().iter().all(|w| *w == w0) {
        return m0.clone();
    }
    let d = m0.dim();
    let mut cdf = Vec::with_capacity(m0.len());
    let mut acc = 0.0;
    for w in m0.weights() {
        acc += w;
        cdf.push(acc);
    }
    let mut x = Vec::with_capacity(n * d);
    let mut alive = Vec::with_capacity(n);
    for k in 0..n {
        let u = CounterRng::new(seed, k as u64, 0, StreamTag::Resample).uniform() * acc;
        let j = cdf.partition_point(|c| *c <= u).min(m0.len() - 1);
        x.extend_from_slice(m0.position(j));
        alive.push(m0.is_alive(j));
    }
    StoppedEnsemble::from_parts_unchecked(d, x, alive, vec![1.0 / n as f64; n])
}

/// Particle system under a policy, advanced one grid step at a time.
pub struct Simulation<'a> {
    model: &'a ModelSpec,
    cfg: SimConfig,
    policy: CompiledPolicy,
    step: usize,
    ens: StoppedEnsemble,
    /// Original particle of every storage slot, keys the random streams.
    ids: Vec<u32>,
    stop_step: Vec<Option<usize>>,
    anchors: Vec<(usize, Vec<f64>)>,
    flow: MeasureFlow,
    group_running: Vec<f64>,
    finished: bool,
}

impl<'a> Simulation<'a> {
    pub fn new(
        model: &'a ModelSpec,
        policy: &StoppingPolicy,
        m0: &StoppedEnsemble,
        cfg: SimConfig,
    ) -> Result<Self> {
        if cfg.n_particles == 0 || cfg.n_steps == 0 {
            return Err(Error::Config(
                "n_particles and n_steps must be positive".into(),
            ));
        }
        if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon {} must be positive",
                cfg.horizon
            )));
        }
        if m0.dim() != model.dim {
            return Err(Error::Config(format!(
                "initial law has dimension {}, model {}",
                m0.dim(),
                model.dim
            )));
        }
        m0.validate()?;
        let compiled = policy.compile(cfg.horizon, cfg.n_steps)?;
        let ens = initial_particles(m0, cfg.n_particles, cfg.seed);
        let n = ens.len();
        let grid = (0..=cfg.n_steps).map(|k| k as f64 * cfg.dt()).collect();
        let flow = MeasureFlow {
            grid,
            dt: cfg.dt(),
            seed: cfg.seed,
            n_particles: n,
            stats_pre: Vec::with_capacity(cfg.n_steps + 1),
            stats_post: Vec::with_capacity(cfg.n_steps + 1),
            jump_steps: compiled.scheduled.iter().map(|(k, _)| *k).collect(),
            snapshot_mode: cfg.snapshots.clone(),
            snapshots: Vec::new(),
            final_state: ens.clone(),
            stop_step: Vec::new(),
            reward: RewardTrace::default(),
            paths: cfg.record_paths.then(Vec::new),
        };
        let groups = if cfg.groups > 1 { cfg.groups } else { 0 };
        Ok(Self {
            model,
            policy: compiled,
            step: 0,
            ids: (0..n as u32).collect(),
            stop_step: ens
                .flags()
                .iter()
                .map(|a| if *a { None } else { Some(0) })
                .collect(),
            ens,
            anchors: Vec::new(),
            flow,
            group_running: vec![0.0; groups],
            cfg,
            finished: false,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Index of the next step to be processed.
    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn current_time(&self) -> f64 {
        self.step as f64 * self.cfg.dt()
    }

    /// The law at the current time, before this step's stops.
    pub fn state(&self) -> &StoppedEnsemble {
        &self.ens
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn groups(&self) -> Option<ParticleGroups> {
        let g = self.group_running.len();
        (g > 0).then(|| ParticleGroups {
            group_of: self.ids.iter().map(|id| id % g as u32).collect(),
            count: g,
        })
    }

    /// Weight split of the surviving mass by `rule`; stopped parts are
    /// appended and keep their parent's stream id.
    fn mass_stop(&mut self, rule: &RandomizedStopRule) -> Result<()> {
        let n = self.ens.len();
        let d = self.ens.dim();
        let step = self.step;
        let (x, alive, w) = self.ens.parts_mut();
        for k in 0..n {
            if !alive[k] {
                continue;
            }
            let p = rule.survival(&x[k * d..(k + 1) * d])?;
            if p >= 1.0 {
                continue;
            }
            if p <= 0.0 {
                alive[k] = false;
                self.stop_step[k] = Some(step);
                continue;
            }
            let wk = w[k];
            w[k] = wk * p;
            x.extend_from_within(k * d..(k + 1) * d);
            alive.push(false);
            w.push(wk * (1.0 - p));
            self.ids.push(self.ids[k]);
            self.stop_step.push(Some(step));
            for (_, a) in self.anchors.iter_mut() {
                let v = a[k];
                a.push(v);
            }
        }
        Ok(())
    }

    /// Applies the individual rules; returns the indices stopped.
    fn individual_stops(&mut self, stats: &MeasureStats) -> Result<Vec<usize>> {
        if self.policy.continuous.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.current_time();
        let step = self.step;
        let d = self.ens.dim();
        let seed = self.cfg.seed;
        let rules = &self.policy.continuous;
        let anchors = &self.anchors;
        let anchor_of = |rule: &ContinuousRule, k: usize| -> f64 {
            match rule {
                ContinuousRule::Barrier { anchor_step, .. } => anchors
                    .iter()
                    .find(|(s, _)| s == anchor_step)
                    .map_or(f64::NAN, |(_, a)| a[k]),
                _ => f64::NAN,
            }
        };
        let n = self.ens.len();
        let mut stopped = Vec::new();
        for k in 0..n {
            if !self.ens.is_alive(k) {
                continue;
            }
            let x = &self.ens.positions()[k * d..(k + 1) * d];
            let mut p = 1.0;
            for rule in rules {
                p *= rule.survival(step, t, x, anchor_of(rule, k), stats)?;
                if p == 0.0 {
                    break;
                }
            }
            let stop = if p >= 1.0 {
                false
            } else if p <= 0.0 {
                true
            } else {
                CounterRng::new(seed, self.ids[k] as u64, step as u64, StreamTag::Bernoulli)
                    .uniform()
                    >= p
            };
            if stop {
                stopped.push(k);
            }
        }
        let (_, alive, _) = self.ens.parts_mut();
        for &k in &stopped {
            alive[k] = false;
            self.stop_step[k] = Some(step);
        }
        Ok(stopped)
    }

    fn euler(&mut self, stats: &MeasureStats) -> Result<()> {
        let t = self.current_time();
        let dt = self.cfg.dt();
        let sq = dt.sqrt();
        let d = self.ens.dim();
        let seed = self.cfg.seed;
        let step = self.step as u64;
        let model = self.model;
        let ids = &self.ids;
        let (x, alive, _) = self.ens.parts_mut();
        let alive: &[bool] = alive;
        x.par_chunks_mut(CHUNK * d)
            .enumerate()
            .for_each(|(c, block)| {
                let mut b = vec![0.0; d];
                let mut s = vec![0.0; d];
                for (j, xk) in block.chunks_mut(d).enumerate() {
                    let k = c * CHUNK + j;
                    if !alive[k] {
                        continue;
                    }
                    (model.drift)(t, xk, stats, &mut b);
                    (model.diffusion)(t, xk, stats, &mut s);
                    let mut rng = CounterRng::new(seed, ids[k] as u64, step, StreamTag::Increment);
                    for i in 0..d {
                        xk[i] += b[i] * dt + s[i] * sq * rng.standard_normal();
                    }
                }
            });
        if let Some(pos) = self.ens.positions().iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                particle: self.ids[pos / d] as usize,
            });
        }
        Ok(())
    }

    /// Processes the current step: scheduled stop, `extra` mass stop,
    /// individual stops, rewards, observers, then the Euler move.
    pub fn step_with(
        &mut self,
        extra: Option<&RandomizedStopRule>,
        observers: &mut [&mut dyn FlowObserver],
    ) -> Result<()> {
        if self.finished {
            return Err(Error::Config(
                "simulation already reached the horizon".into(),
            ));
        }
        let k = self.step;
        let n_steps = self.cfg.n_steps;
        let t = self.current_time();
        let stats_pre = self.model.stat_sums(&self.ens);
        let scheduled = self
            .policy
            .scheduled
            .iter()
            .find(|(s, _)| *s == k)
            .map(|(_, r)| r.clone());
        let is_jump = scheduled.is_some() || extra.is_some();
        if extra.is_some() && !self.flow.jump_steps.contains(&k) {
            self.flow.jump_steps.push(k);
        }
        let pre = (k == 0 || k == n_steps || is_jump).then(|| Arc::new(self.ens.clone()));
        if let Some(rule) = scheduled {
            self.mass_stop(&rule)?;
        }
        if let Some(rule) = extra {
            self.mass_stop(rule)?;
        }
        let mid = is_jump.then(|| Arc::new(self.ens.clone()));
        let sums = if is_jump {
            self.model.stat_sums(&self.ens)
        } else {
            stats_pre
        };
        let stopped = self.individual_stops(&sums.stats())?;
        let stats = if stopped.is_empty() {
            sums.stats()
        } else {
            self.model.stats(&self.ens)
        };
        self.flow.stats_pre.push(stats_pre.stats());
        self.flow.stats_post.push(stats);

        let groups = self.groups();
        if k < n_steps {
            if let Some(f) = &self.model.running {
                let (full, per_group) = f.value_and_groups(t, &self.ens, groups.as_ref());
                self.flow.reward.running.push(full);
                for (acc, v) in self.group_running.iter_mut().zip(per_group) {
                    *acc += v * self.cfg.dt();
                }
            } else {
                self.flow.reward.running.push(0.0);
            }
        } else {
            self.flow.reward.terminal = self.model.terminal_value(&self.ens);
            let terminal_groups = match (&self.model.terminal, &groups) {
                (Some(g), Some(gr)) => g.group_values(&self.ens, gr),
                _ => vec![0.0; self.group_running.len()],
            };
            self.flow.reward.group_totals = self
                .group_running
                .iter()
                .zip(terminal_groups)
                .map(|(a, b)| a + b)
                .collect();
        }

        let view = StepView {
            step: k,
            n_steps,
            t,
            dt: self.cfg.dt(),
            pre: pre.as_deref(),
            mid: mid.as_deref(),
            post: &self.ens,
            stats: &stats,
            newly_stopped: &stopped,
            is_jump,
        };
        for obs in observers.iter_mut() {
            obs.observe(&view)?;
        }
        let keep = match &self.cfg.snapshots {
            SnapshotMode::None => false,
            SnapshotMode::All => true,
            SnapshotMode::Steps(list) => list.contains(&k),
        };
        if keep {
            self.flow.snapshots.push(Snapshot {
                step: k,
                t,
                pre,
                mid,
                post: Arc::new(self.ens.clone()),
                newly_stopped: stopped,
            });
        }
        if let Some(paths) = self.flow.paths.as_mut() {
            for (j, (x, i, _)) in self.ens.particles().enumerate() {
                paths.push((j, t, x[0], i));
            }
        }

        if k == n_steps {
            self.finished = true;
            return Ok(());
        }
        if self.policy.anchor_steps.contains(&k) {
            let d = self.ens.dim();
            let a = (0..self.ens.len())
                .map(|j| self.ens.positions()[j * d])
                .collect();
            self.anchors.push((k, a));
        }
        self.euler(&stats)?;
        self.step += 1;
        Ok(())
    }

    /// Runs the remaining steps and returns the flow.
    pub fn run(mut self, observers: &mut [&mut dyn FlowObserver]) -> Result<MeasureFlow> {
        while !self.finished {
            self.step_with(None, observers)?;
        }
        Ok(self.into_flow())
    }

    pub fn into_flow(mut self) -> MeasureFlow {
        self.flow.jump_steps.sort_unstable();
        self.flow.final_state = self.ens;
        self.flow.stop_step = self.stop_step;
        self.flow
    }
}

/// Simulates the stopped particle system under `policy`.
pub fn simulate(
    model: &ModelSpec,
    policy: &StoppingPolicy,
    m0: &StoppedEnsemble,
    cfg: SimConfig,
) -> Result<MeasureFlow> {
    Simulation::new(model, policy, m0, cfg)?.run(&mut [])
}

/// Like [`simulate`], feeding every step to `observers` as it happens.
pub fn simulate_observed(
    model: &ModelSpec,
    policy: &StoppingPolicy,
    m0: &StoppedEnsemble,
    cfg: SimConfig,
    observers: &mut [&mut dyn FlowObserver],
) -> Result<MeasureFlow> {
    Simulation::new(model, policy, m0, cfg)?.run(observers)
}
