use std::sync::Arc;

use crate::measure::{Linearization, StoppedEnsemble, TestFunction};
use crate::quadrature::CompensatedSum;

/// Scalar statistics of the current law exposed to coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct MeasureStats {
    pub survival_mass: f64,
    /// Mean of the first coordinate under the normalised surviving mass.
    pub mean: f64,
    pub variance: f64,
    /// `m[psi]` for the model's user statistic, NaN when none is set.
    pub user: f64,
}

impl MeasureStats {
    pub fn of(m: &StoppedEnsemble, user: Option<&dyn TestFunction>) -> Self {
        StatSums::of(m, user).stats()
    }
}

/// Raw weighted sums behind [`MeasureStats`].
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StatSums {
    s0: CompensatedSum,
    s1: f64,
    s2: f64,
    user: f64,
}

impl StatSums {
    pub(crate) fn of(m: &StoppedEnsemble, user: Option<&dyn TestFunction>) -> Self {
        let mut out = Self {
            user: if user.is_some() { 0.0 } else { f64::NAN },
            ..Self::default()
        };
        for (x, alive, w) in m.particles() {
            if alive {
                out.s0.add(w);
                out.s1 += w * x[0];
                out.s2 += w * x[0] * x[0];
            }
            if let Some(psi) = user {
                out.user += w * psi.value(x, alive);
            }
        }
        out
    }

    pub(crate) fn stats(&self) -> MeasureStats {
        let s0 = self.s0.value();
        let survival_mass = s0.max(0.0);
        let (mean, variance) = if s0 > 1e-300 {
            let mean = self.s1 / s0;
            (mean, (self.s2 / s0 - mean * mean).max(0.0))
        } else {
            (f64::NAN, f64::NAN)
        };
        MeasureStats {
            survival_mass,
            mean,
            variance,
            user: self.user,
        }
    }
}

/// Vector coefficient `(t, x, stats) -> out`, with `out` of length `d`.
pub type Coefficient = Arc<dyn Fn(f64, &[f64], &MeasureStats, &mut [f64]) + Send + Sync>;

/// Sub-ensembles used for batch standard errors.
#[derive(Debug, Clone)]
pub struct ParticleGroups {
    /// Group of every particle in storage order.
    pub group_of: Vec<u32>,
    pub count: usize,
}

impl ParticleGroups {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (k, g) in self.group_of.iter().enumerate() {
            out[*g as usize].push(k);
        }
        out
    }

    /// Evaluates `f` on every group's renormalised sub-ensemble.
    pub fn map<F: Fn(&StoppedEnsemble) -> f64>(&self, m: &StoppedEnsemble, f: F) -> Vec<f64> {
        self.members()
            .iter()
            .map(|idx| m.restrict(idx).map_or(f64::NAN, |sub| f(&sub)))
            .collect()
    }
}

/// Aggregate running reward `F(t, m)`.
pub trait RunningReward: Send + Sync {
    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64;

    fn group_values(&self, t: f64, m: &StoppedEnsemble, groups: &ParticleGroups) -> Vec<f64> {
        groups.map(m, |sub| self.value(t, sub))
    }

    /// Full-ensemble value together with the per-group values.
    fn value_and_groups(
        &self,
        t: f64,
        m: &StoppedEnsemble,
        groups: Option<&ParticleGroups>,
    ) -> (f64, Vec<f64>) {
        (
            self.value(t, m),
            groups.map_or_else(Vec::new, |g| self.group_values(t, m, g)),
        )
    }
}

impl<F> RunningReward for F
where
    F: Fn(f64, &StoppedEnsemble) -> f64 + Send + Sync,
{
    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self(t, m)
    }
}

/// Terminal reward `g(m)`.
pub trait TerminalReward: Send + Sync {
    fn value(&self, m: &StoppedEnsemble) -> f64;

    fn group_values(&self, m: &StoppedEnsemble, groups: &ParticleGroups) -> Vec<f64> {
        groups.map(m, |sub| self.value(sub))
    }
}

impl<F> TerminalReward for F
where
    F: Fn(&StoppedEnsemble) -> f64 + Send + Sync,
{
    fn value(&self, m: &StoppedEnsemble) -> f64 {
        self(m)
    }
}

/// `F(t, m) = int f(t, x, m) m(dx, 1)`.
pub struct IntegrandReward {
    f: Arc<dyn Fn(f64, &[f64], &MeasureStats) -> f64 + Send + Sync>,
    user: Option<Arc<dyn TestFunction>>,
}

impl RunningReward for IntegrandReward {
    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        let stats = MeasureStats::of(m, self.user.as_deref());
        m.particles()
            .filter(|p| p.1)
            .map(|(x, _, w)| w * (self.f)(t, x, &stats))
            .sum()
    }
}

/// Coefficients and rewards of a stopped McKean-Vlasov problem.
#[derive(Clone)]
pub struct ModelSpec {
    pub dim: usize,
    pub drift: Coefficient,
    /// Diagonal diffusion coefficient.
    pub diffusion: Coefficient,
    pub running: Option<Arc<dyn RunningReward>>,
    pub terminal: Option<Arc<dyn TerminalReward>>,
    /// Test function whose expectation is reported as `stats.user`.
    pub user_stat: Option<Arc<dyn TestFunction>>,
}

impl ModelSpec {
    pub fn new(dim: usize, drift: Coefficient, diffusion: Coefficient) -> Self {
        Self {
            dim,
            drift,
            diffusion,
            running: None,
            terminal: None,
            user_stat: None,
        }
    }

    /// One-dimensional model with scalar coefficients.
    pub fn scalar<B, S>(b: B, sigma: S) -> Self
    where
        B: Fn(f64, f64, &MeasureStats) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64, &MeasureStats) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            1,
            Arc::new(move |t, x, s, out| out[0] = b(t, x[0], s)),
            Arc::new(move |t, x, s, out| out[0] = sigma(t, x[0], s)),
        )
    }

    /// Constant drift `b` and volatility `sigma` in one dimension.
    pub fn brownian(b: f64, sigma: f64) -> Self {
        Self::scalar(move |_, _, _| b, move |_, _, _| sigma)
    }

    pub fn with_running<R: RunningReward + 'static>(mut self, reward: R) -> Self {
        self.running = Some(Arc::new(reward));
        self
    }

    /// Running reward given by an integrand against the surviving mass.
    pub fn with_integrand<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &MeasureStats) -> f64 + Send + Sync + 'static,
    {
        self.running = Some(Arc::new(IntegrandReward {
            f: Arc::new(f),
            user: self.user_stat.clone(),
        }));
        self
    }

    pub fn with_terminal<G: TerminalReward + 'static>(mut self, g: G) -> Self {
        self.terminal = Some(Arc::new(g));
        self
    }

    pub fn with_user_stat<P: TestFunction + 'static>(mut self, psi: P) -> Self {
        self.user_stat = Some(Arc::new(psi));
        self
    }

    pub fn stats(&self, m: &StoppedEnsemble) -> MeasureStats {
        MeasureStats::of(m, self.user_stat.as_deref())
    }

    pub(crate) fn stat_sums(&self, m: &StoppedEnsemble) -> StatSums {
        StatSums::of(m, self.user_stat.as_deref())
    }

    /// `F(t, m)`, zero when the model has no running reward.
    pub fn running_value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.running.as_ref().map_or(0.0, |f| f.value(t, m))
    }

    /// `g(m)`, zero when the model has no terminal reward.
    pub fn terminal_value(&self, m: &StoppedEnsemble) -> f64 {
        self.terminal.as_ref().map_or(0.0, |g| g.value(m))
    }

    /// `L u(t, m) = d_t u + sum over surviving particles of w L_x delta_m u_1`.
    pub fn generator_value(
        &self,
        lin: &dyn Linearization,
        t: f64,
        m: &StoppedEnsemble,
        stats: &MeasureStats,
    ) -> f64 {
        let d = self.dim;
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut acc = 0.0;
        for (x, alive, w) in m.particles() {
            if !alive || w == 0.0 {
                continue;
            }
            (self.drift)(t, x, stats, &mut b);
            (self.diffusion)(t, x, stats, &mut s);
            acc += w * lin.generator(x, &b, &s);
        }
        lin.time_derivative() + acc
    }
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("running", &self.running.is_some())
            .field("terminal", &self.terminal.is_some())
            .field("user_stat", &self.user_stat.is_some())
            .finish()
    }
}
