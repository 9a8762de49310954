use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::ensemble::fmt_f64;
use crate::measure::StoppedEnsemble;
use crate::sim::model::MeasureStats;

/// Which ensembles a simulation keeps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SnapshotMode {
    #[default]
    None,
    /// Every step, which allows full replays.
    All,
    /// Only the listed steps.
    Steps(Vec<usize>),
}

/// The law at one grid time.
///
/// `pre` is the left limit `m_{t-}`, `mid` the law after scheduled mass
/// stops and `post` the law after individual stops. `pre` is kept at the
/// endpoints and at jump steps, `mid` at jump steps only.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub pre: Option<Arc<StoppedEnsemble>>,
    pub mid: Option<Arc<StoppedEnsemble>>,
    pub post: Arc<StoppedEnsemble>,
    /// Indices into `post` of particles stopped individually at this step.
    pub newly_stopped: Vec<usize>,
}

/// Borrowed view of one step handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub step: usize,
    pub n_steps: usize,
    pub t: f64,
    pub dt: f64,
    pub pre: Option<&'a StoppedEnsemble>,
    pub mid: Option<&'a StoppedEnsemble>,
    pub post: &'a StoppedEnsemble,
    pub stats: &'a MeasureStats,
    pub newly_stopped: &'a [usize],
    pub is_jump: bool,
}

impl<'a> StepView<'a> {
    pub fn is_last(&self) -> bool {
        self.step == self.n_steps
    }

    /// Law after the scheduled stops of this step.
    pub fn after_jump(&self) -> &'a StoppedEnsemble {
        self.mid.unwrap_or(self.post)
    }
}

/// Receives every step of a simulation, or of a replayed flow.
pub trait FlowObserver {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

/// Running and terminal rewards collected during a simulation.
#[derive(Debug, Clone, Default)]
pub struct RewardTrace {
    /// `F(t_k, m_{t_k})` for `k < n`.
    pub running: Vec<f64>,
    pub terminal: f64,
    /// Per-group `sum_k F dt + g`, empty when grouping is off.
    pub group_totals: Vec<f64>,
}

/// Time-indexed path of laws produced by the simulator.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub grid: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub n_particles: usize,
    pub stats_pre: Vec<MeasureStats>,
    pub stats_post: Vec<MeasureStats>,
    /// Steps carrying a scheduled mass stop.
    pub jump_steps: Vec<usize>,
    pub snapshot_mode: SnapshotMode,
    pub snapshots: Vec<Snapshot>,
    pub final_state: StoppedEnsemble,
    /// Step at which each particle of `final_state` stopped, `None` if it
    /// survived to the horizon.
    pub stop_step: Vec<Option<usize>>,
    pub reward: RewardTrace,
    /// `(particle, t, x0, i)` rows when path recording is on.
    pub paths: Option<Vec<(usize, f64, f64, bool)>>,
}

impl MeasureFlow {
    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }

    pub fn snapshot(&self, step: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    pub fn has_full_snapshots(&self) -> bool {
        self.snapshot_mode == SnapshotMode::All && self.snapshots.len() == self.grid.len()
    }

    /// Feeds the stored steps to `observer` in order.
    pub fn replay(&self, observer: &mut dyn FlowObserver) -> Result<()> {
        if !self.has_full_snapshots() {
            return Err(Error::MissingData(
                "flow was simulated without full snapshots".into(),
            ));
        }
        for s in &self.snapshots {
            let is_jump = self.jump_steps.contains(&s.step);
            if is_jump && s.pre.is_none() {
                return Err(Error::MissingData(format!(
                    "pre-jump snapshot missing at step {}",
                    s.step
                )));
            }
            let view = StepView {
                step: s.step,
                n_steps: self.n_steps(),
                t: s.t,
                dt: self.dt,
                pre: s.pre.as_deref(),
                mid: s.mid.as_deref(),
                post: &s.post,
                stats: &self.stats_post[s.step],
                newly_stopped: &s.newly_stopped,
                is_jump,
            };
            observer.observe(&view)?;
        }
        Ok(())
    }

    /// Writes `t,survival_mass,mean_x_survivors,var_x_survivors,stat_user`
    /// using the post-stop law at every grid time.
    pub fn write_stats_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "t",
            "survival_mass",
            "mean_x_survivors",
            "var_x_survivors",
            "stat_user",
        ])?;
        for (t, s) in self.grid.iter().zip(&self.stats_post) {
            wtr.write_record([
                fmt_f64(*t),
                fmt_f64(s.survival_mass),
                fmt_f64(s.mean),
                fmt_f64(s.variance),
                fmt_f64(s.user),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes the `particle,t,x,i` trajectory dump.
    pub fn write_paths_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self
            .paths
            .as_ref()
            .ok_or_else(|| Error::MissingData("flow has no recorded paths".into()))?;
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["particle", "t", "x", "i"])?;
        for (p, t, x, i) in rows {
            wtr.write_record([
                p.to_string(),
                fmt_f64(*t),
                fmt_f64(*x),
                if *i { "1" } else { "0" }.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads back the stats CSV written by [`MeasureFlow::write_stats_csv`].
pub fn read_stats_csv<R: std::io::Read>(input: R) -> Result<Vec<(f64, MeasureStats)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Input(format!("bad number '{s}': {e}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 5 {
            return Err(Error::Input("flow CSV rows need 5 columns".into()));
        }
        out.push((
            v[0],
            MeasureStats {
                survival_mass: v[1],
                mean: v[2],
                variance: v[3],
                user: v[4],
            },
        ));
    }
    Ok(out)
}
