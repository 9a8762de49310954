use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::RandomizedStopRule;
use crate::sim::model::MeasureStats;

pub type RegionFn = Arc<dyn Fn(f64, &[f64], &MeasureStats) -> bool + Send + Sync>;
pub type ProbabilityFn = Arc<dyn Fn(f64, &[f64], &MeasureStats) -> f64 + Send + Sync>;

/// How the surviving mass is stopped along a simulation.
///
/// Scheduled mass stops act on the law by weight splitting and are the
/// only stops recorded as jumps of the flow. Every other variant stops
/// individual particles.
#[derive(Clone)]
pub enum StoppingPolicy {
    NeverStop,
    /// Stop every surviving particle at the grid step nearest `time`.
    StopAll {
        time: f64,
    },
    /// Keep going while `K(t, x, stats)` holds.
    PureRegion(RegionFn),
    /// Survive each step with probability `p(t, x, stats)`.
    Randomized(ProbabilityFn),
    /// For `t > t0`, stop once `X_t - X_{t0} >= c` (first coordinate).
    Barrier {
        t0: f64,
        c: f64,
    },
    ScheduledMassStop(Vec<(f64, RandomizedStopRule)>),
    /// All components together; scheduled stops act before individual ones.
    Composite(Vec<StoppingPolicy>),
}

impl std::fmt::Debug for StoppingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::NeverStop => write!(f, "NeverStop"),
            Self::StopAll { time } => write!(f, "StopAll {{ time: {time} }}"),
            Self::PureRegion(_) => write!(f, "PureRegion(..)"),
            Self::Randomized(_) => write!(f, "Randomized(..)"),
            Self::Barrier { t0, c } => write!(f, "Barrier {{ t0: {t0}, c: {c} }}"),
            Self::ScheduledMassStop(list) => f
                .debug_list()
                .entries(list.iter().map(|(t, r)| (t, r)))
                .finish(),
            Self::Composite(parts) => f.debug_tuple("Composite").field(parts).finish(),
        }
    }
}

/// Individual stopping rule evaluated per particle and step.
#[derive(Clone)]
pub(crate) enum ContinuousRule {
    StopAll { step: usize },
    Region(RegionFn),
    Randomized(ProbabilityFn),
    Barrier { anchor_step: usize, c: f64 },
}

/// A policy resolved against a time grid.
#[derive(Clone, Default)]
pub(crate) struct CompiledPolicy {
    /// `(step, rule)`, strictly increasing in step.
    pub scheduled: Vec<(usize, RandomizedStopRule)>,
    pub continuous: Vec<ContinuousRule>,
    /// Steps at which barrier anchors are recorded.
    pub anchor_steps: Vec<usize>,
}

impl StoppingPolicy {
    pub fn region<K>(k: K) -> Self
    where
        K: Fn(f64, &[f64], &MeasureStats) -> bool + Send + Sync + 'static,
    {
        Self::PureRegion(Arc::new(k))
    }

    pub fn randomized<P>(p: P) -> Self
    where
        P: Fn(f64, &[f64], &MeasureStats) -> f64 + Send + Sync + 'static,
    {
        Self::Randomized(Arc::new(p))
    }

    /// Times of the scheduled mass stops, if any.
    pub fn scheduled_times(&self) -> Vec<f64> {
        match self {
            Self::ScheduledMassStop(list) => list.iter().map(|(t, _)| *t).collect(),
            Self::Composite(parts) => parts.iter().flat_map(|p| p.scheduled_times()).collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn compile(&self, horizon: f64, n_steps: usize) -> Result<CompiledPolicy> {
        let dt = horizon / n_steps as f64;
        let snap = |t: f64| -> Result<usize> {
            if !(t >= -1e-12 && t <= horizon + 1e-12) {
                return Err(Error::Config(format!(
                    "policy time {t} outside [0, {horizon}]"
                )));
            }
            Ok(((t / dt).round() as usize).min(n_steps))
        };
        let mut out = CompiledPolicy::default();
        let mut stack = vec![self];
        let mut flat = Vec::new();
        while let Some(p) = stack.pop() {
            match p {
                Self::Composite(parts) => stack.extend(parts.iter().rev()),
                other => flat.push(other),
            }
        }
        for p in flat {
            match p {
                Self::NeverStop | Self::Composite(_) => {}
                Self::StopAll { time } => out
                    .continuous
                    .push(ContinuousRule::StopAll { step: snap(*time)? }),
                Self::PureRegion(k) => out.continuous.push(ContinuousRule::Region(k.clone())),
                Self::Randomized(p) => out.continuous.push(ContinuousRule::Randomized(p.clone())),
                Self::Barrier { t0, c } => {
                    let anchor_step = snap(*t0)?;
                    out.anchor_steps.push(anchor_step);
                    out.continuous
                        .push(ContinuousRule::Barrier { anchor_step, c: *c });
                }
                Self::ScheduledMassStop(list) => {
                    if list.windows(2).any(|w| w[0].0 >= w[1].0) {
                        return Err(Error::Config(
                            "scheduled stop times must be strictly increasing".into(),
                        ));
                    }
                    for (t, rule) in list {
                        out.scheduled.push((snap(*t)?, rule.clone()));
                    }
                }
            }
        }
        out.scheduled.sort_by_key(|(k, _)| *k);
        if out.scheduled.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(
                "two scheduled stops fall on the same grid step".into(),
            ));
        }
        out.anchor_steps.sort_unstable();
        out.anchor_steps.dedup();
        Ok(out)
    }
}

impl ContinuousRule {
    /// Survival probability of one particle over this step.
    #[inline]
    pub(crate) fn survival(
        &self,
        step: usize,
        t: f64,
        x: &[f64],
        anchor: f64,
        stats: &MeasureStats,
    ) -> Result<f64> {
        match self {
            Self::StopAll { step: s } => Ok(if step >= *s { 0.0 } else { 1.0 }),
            Self::Region(k) => Ok(if k(t, x, stats) { 1.0 } else { 0.0 }),
            Self::Randomized(p) => {
                let v = p(t, x, stats);
                if (0.0..=1.0).contains(&v) {
                    Ok(v)
                } else {
                    Err(Error::Contract(format!(
                        "policy survival probability {v} at t={t}, x={x:?}"
                    )))
                }
            }
            Self::Barrier { anchor_step, c } => Ok(if step > *anchor_step && x[0] - anchor >= *c {
                0.0
            } else {
                1.0
            }),
        }
    }
}
