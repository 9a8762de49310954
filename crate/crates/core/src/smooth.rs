//! An explicit classical solution of the obstacle equation.
//!
//! With `T = 2`, `psi(x) = e^{-x^2/2}`, Brownian dynamics and
//! `v0(m) = int psi(x) m(dx, 1)`, the functional
//! `u0(t, m) = (T - t) phi(t, v0(m))` with `phi(t, x) = exp(-((a_t - x)^+)^3)`
//! solves the obstacle equation for the running reward
//! `F = -L u0 - (v0 - a_t)^+` and `g = 0`. The optimal flow stops half the
//! mass at time 0, none on `(0, 1]`, lets particles hit the barrier
//! `X_t - X_1 >= 1` on `(1, 2)` and stops the rest at 2.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::measure::{
    CylindricalFunctional, Outer, RandomizedStopRule, ScalarTestFunction, StoppedEnsemble,
};
use crate::quadrature::{adaptive_gk, gauss_hermite_normal};
use crate::sim::{ModelSpec, ParticleGroups, RunningReward, StoppingPolicy};

pub const HORIZON: f64 = 2.0;

/// Absolute tolerance of the two-dimensional `kappa1` quadrature.
pub const KAPPA1_TOL: f64 = 1e-8;

/// Step of the central difference for `a'` on `(1, 2]`.
pub const THRESHOLD_FD_STEP: f64 = 1e-4;

const HERMITE_NODES: usize = 64;

#[inline]
pub fn psi(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

#[inline]
pub fn psi_second(x: f64) -> f64 {
    (x * x - 1.0) * psi(x)
}

#[inline]
fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `kappa0(t, x) = E[psi(x + W_t)] = (1 + t)^{-1/2} exp(-x^2 / (2 (1 + t)))`.
pub fn kappa0(t: f64, x: f64) -> f64 {
    (-(x * x) / (2.0 * (1.0 + t))).exp() / (1.0 + t).sqrt()
}

/// `kappa1(t, x) = E[psi(x + W_t) 1{max_{s <= t} W_s < 1}]` by adaptive
/// quadrature against the joint density of `(W_t, max W)`.
pub fn kappa1(t: f64, x: f64) -> Result<f64> {
    if t <= 0.0 {
        return Ok(psi(x));
    }
    let c = 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * t.powf(1.5));
    let density = move |a: f64, b: f64| {
        let u = 2.0 * b - a;
        c * u * (-(u * u) / (2.0 * t)).exp()
    };
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let outer = |a: f64| {
        let inner = adaptive_gk(|b| density(a, b), a.max(0.0), 1.0, 0.1 * KAPPA1_TOL);
        match inner {
            Ok(v) => psi(x + a) * v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        }
    };
    let lo = -8.0 * t.sqrt();
    let v = adaptive_gk(outer, lo.min(1.0), 1.0, KAPPA1_TOL)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(v)
}

/// Closed form of `kappa1` from the reflection principle:
/// `kappa0(t, x) Phi(r (1 + x t/(1+t))) - kappa0(t, x+2) Phi(r ((x+1) t - 1)/(1+t))`
/// with `r = sqrt((1 + t) / t)`.
pub fn kappa1_reflection(t: f64, x: f64) -> f64 {
    if t <= 0.0 {
        return psi(x);
    }
    let r = ((1.0 + t) / t).sqrt();
    let up = r * (1.0 + x * t / (1.0 + t));
    let down = r * ((x + 1.0) * t - 1.0) / (1.0 + t);
    kappa0(t, x) * normal_cdf(up) - kappa0(t, x + 2.0) * normal_cdf(down)
}

/// Initial law of the pure-strategy variant: a density with a median.
#[derive(Clone)]
pub struct InitialDensity {
    pub rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Integration range standing in for the real line.
    pub support: (f64, f64),
    pub median: f64,
}

impl InitialDensity {
    /// Checks normalisation and that `median` splits the mass in half.
    pub fn new<R>(rho: R, support: (f64, f64), median: f64) -> Result<Self>
    where
        R: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let (lo, hi) = support;
        if !(lo < median && median < hi) {
            return Err(Error::Input(format!(
                "median {median} is not inside the support [{lo}, {hi}]"
            )));
        }
        let total = adaptive_gk(&rho, lo, hi, 1e-10)?;
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "density integrates to {total}, not 1"
            )));
        }
        let below = adaptive_gk(&rho, lo, median, 1e-10)?;
        if (below - 0.5).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "mass below {median} is {below}, so it is not a median"
            )));
        }
        Ok(Self {
            rho: Arc::new(rho),
            support,
            median,
        })
    }

    pub fn standard_normal() -> Self {
        let rho = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        Self {
            rho: Arc::new(rho),
            support: (-12.0, 12.0),
            median: 0.0,
        }
    }
}

/// The threshold curve `a_t`.
#[derive(Clone)]
pub enum ThresholdCurve {
    /// `m_{0-} = delta_{(0, 1)}`.
    PointMass,
    /// Continuous initial law, for the pure stopping strategy.
    Density(InitialDensity),
}

/// The explicit instance: threshold data, `u0`, `F`, and the optimal policy.
pub struct SmoothInstance {
    curve: ThresholdCurve,
    hermite: (Vec<f64>, Vec<f64>),
    cache: RwLock<HashMap<i64, f64>>,
}

/// Everything `u0_and_F` reports at one `(t, m)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SmoothEvaluation {
    pub v0: f64,
    pub a: f64,
    pub u0: f64,
    pub running: f64,
    pub generator: f64,
    /// `-(L u0 + F)(t, m) = (v0 - a_t)^+`.
    pub residual: f64,
    /// `D_I u0(t, m, x) = d_i_scale * psi(x)`.
    pub d_i_scale: f64,
}

impl SmoothInstance {
    pub fn new(curve: ThresholdCurve) -> Self {
        Self {
            curve,
            hermite: gauss_hermite_normal(HERMITE_NODES),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn point_mass() -> Arc<Self> {
        Arc::new(Self::new(ThresholdCurve::PointMass))
    }

    pub fn with_density(density: InitialDensity) -> Arc<Self> {
        Arc::new(Self::new(ThresholdCurve::Density(density)))
    }

    pub fn curve(&self) -> &ThresholdCurve {
        &self.curve
    }

    /// `m_{0-}` of the point-mass instance.
    pub fn initial_law() -> StoppedEnsemble {
        StoppedEnsemble::dirac(&[0.0], true)
    }

    fn hermite_mean<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.hermite
            .0
            .iter()
            .zip(&self.hermite.1)
            .map(|(z, w)| w * f(*z))
            .sum()
    }

    /// `a_t` on the `(1, 2]` branch, extended to any `t >= 1`.
    fn late_branch(&self, t: f64) -> f64 {
        let s = t - 1.0;
        match &self.curve {
            ThresholdCurve::PointMass => 0.5 * self.hermite_mean(|z| kappa1_reflection(s, z)),
            ThresholdCurve::Density(d) => {
                let inner =
                    |x: f64| (d.rho)(x) * self.hermite_mean(|z| kappa1_reflection(s, x + z));
                adaptive_gk(inner, d.support.0, d.median, 1e-12).unwrap_or(f64::NAN)
            }
        }
    }

    fn early_branch(&self, t: f64) -> f64 {
        let bump = t * t * (1.0 - t) * (1.0 - t);
        match &self.curve {
            ThresholdCurve::PointMass => 0.5 * (kappa0(t, 0.0) + bump),
            ThresholdCurve::Density(d) => {
                let integral =
                    adaptive_gk(|x| kappa0(t, x) * (d.rho)(x), d.support.0, d.median, 1e-12)
                        .unwrap_or(f64::NAN);
                integral + bump
            }
        }
    }

    fn early_derivative(&self, t: f64) -> f64 {
        let bump = 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        match &self.curve {
            ThresholdCurve::PointMass => 0.5 * (-0.5 * (1.0 + t).powf(-1.5) + bump),
            ThresholdCurve::Density(d) => {
                // d/dt kappa0(t, x) = kappa0 (x^2 - (1 + t)) / (2 (1 + t)^2)
                let dk = |x: f64| kappa0(t, x) * (x * x - (1.0 + t)) / (2.0 * (1.0 + t).powi(2));
                adaptive_gk(|x| dk(x) * (d.rho)(x), d.support.0, d.median, 1e-12)
                    .unwrap_or(f64::NAN)
                    + bump
            }
        }
    }

    /// The threshold `a_t`, using the `[0, 1]` branch at `t = 1`.
    pub fn threshold(&self, t: f64) -> f64 {
        let key = (t * 1e12).round() as i64;
        if let Some(v) = self.cache.read().expect("threshold cache").get(&key) {
            return *v;
        }
        let v = if t <= 1.0 {
            self.early_branch(t)
        } else {
            self.late_branch(t)
        };
        self.cache.write().expect("threshold cache").insert(key, v);
        v
    }

    /// `a'_t`: closed form on `[0, 1]`, central differences on `(1, 2]`
    /// (one-sided second order within one step of `t = 1`).
    pub fn threshold_derivative(&self, t: f64) -> f64 {
        if t <= 1.0 {
            return self.early_derivative(t);
        }
        let h = THRESHOLD_FD_STEP;
        let g = |s: f64| self.cached_late(s);
        if t - h < 1.0 {
            (-3.0 * g(t) + 4.0 * g(t + h) - g(t + 2.0 * h)) / (2.0 * h)
        } else {
            (g(t + h) - g(t - h)) / (2.0 * h)
        }
    }

    fn cached_late(&self, t: f64) -> f64 {
        if t > 1.0 {
            self.threshold(t)
        } else {
            self.late_branch(t)
        }
    }

    /// Right limit `a(1+)` of the threshold.
    pub fn threshold_right_of_one(&self) -> f64 {
        self.late_branch(1.0)
    }

    /// One-sided derivative `a'(1+)`.
    pub fn threshold_derivative_right_of_one(&self) -> f64 {
        let h = THRESHOLD_FD_STEP;
        (-3.0 * self.late_branch(1.0) + 4.0 * self.late_branch(1.0 + h)
            - self.late_branch(1.0 + 2.0 * h))
            / (2.0 * h)
    }

    #[inline]
    pub fn phi(&self, t: f64, v: f64) -> f64 {
        let gap = (self.threshold(t) - v).max(0.0);
        (-gap * gap * gap).exp()
    }

    /// `d_x phi(t, v) = 3 ((a_t - v)^+)^2 phi(t, v)`.
    #[inline]
    pub fn phi_x(&self, t: f64, v: f64) -> f64 {
        let gap = (self.threshold(t) - v).max(0.0);
        3.0 * gap * gap * (-gap * gap * gap).exp()
    }

    /// `d_t phi(t, v) = -3 ((a_t - v)^+)^2 a'_t phi(t, v)`.
    #[inline]
    pub fn phi_t(&self, t: f64, v: f64) -> f64 {
        let gap = (self.threshold(t) - v).max(0.0);
        if gap == 0.0 {
            return 0.0;
        }
        -3.0 * gap * gap * self.threshold_derivative(t) * (-gap * gap * gap).exp()
    }

    pub fn v0(m: &StoppedEnsemble) -> f64 {
        m.particles()
            .filter(|p| p.1)
            .map(|(x, _, w)| w * psi(x[0]))
            .sum()
    }

    pub fn u0(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        (HORIZON - t) * self.phi(t, Self::v0(m))
    }

    /// `u0`, `F`, `L u0`, `-(L u0 + F)` and the `D_I u0` scale at `(t, m)`.
    pub fn evaluate(&self, t: f64, m: &StoppedEnsemble) -> SmoothEvaluation {
        let (mut v0, mut curv) = (0.0, 0.0);
        for (x, alive, w) in m.particles() {
            if alive {
                let e = psi(x[0]);
                v0 += w * e;
                curv += w * (x[0] * x[0] - 1.0) * e;
            }
        }
        self.evaluate_sums(t, v0, curv)
    }

    /// Evaluation from `v0 = sum w psi` and `curv = sum w psi''` over the
    /// surviving particles.
    fn evaluate_sums(&self, t: f64, v0: f64, curv: f64) -> SmoothEvaluation {
        let a = self.threshold(t);
        let phi = self.phi(t, v0);
        let phi_x = self.phi_x(t, v0);
        let dt_u = (HORIZON - t) * self.phi_t(t, v0) - phi;
        let generator = dt_u + 0.5 * (HORIZON - t) * phi_x * curv;
        let residual = (v0 - a).max(0.0);
        SmoothEvaluation {
            v0,
            a,
            u0: (HORIZON - t) * phi,
            running: -generator - residual,
            generator,
            residual,
            d_i_scale: (HORIZON - t) * phi_x,
        }
    }

    /// `D_I u0(t, m, x)` at every particle of `m`.
    pub fn d_i_field(&self, t: f64, m: &StoppedEnsemble) -> Vec<f64> {
        let s = self.evaluate(t, m).d_i_scale;
        m.particles().map(|(x, _, _)| s * psi(x[0])).collect()
    }

    /// `u0` as a cylindrical functional `eta(t, m[psi])` with
    /// `eta(t, v) = (T - t) phi(t, v)`.
    pub fn functional(self: &Arc<Self>) -> CylindricalFunctional {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        let outer = Outer::new(
            move |t, v| (HORIZON - t) * a.phi(t, v),
            move |t, v| (HORIZON - t) * b.phi_t(t, v) - b.phi(t, v),
            move |t, v| (HORIZON - t) * c.phi_x(t, v),
        );
        CylindricalFunctional::new(ScalarTestFunction::gaussian_alive(), outer)
    }

    /// Brownian dynamics with running reward `F`, `g = 0` and `v0` as the
    /// user statistic.
    pub fn model(self: &Arc<Self>) -> ModelSpec {
        ModelSpec::brownian(0.0, 1.0)
            .with_user_stat(ScalarTestFunction::gaussian_alive())
            .with_running(SmoothReward(self.clone()))
            .with_terminal(|_: &StoppedEnsemble| 0.0)
    }

    /// The four-phase optimal policy.
    pub fn optimal_policy() -> StoppingPolicy {
        Self::policy_with_barrier(1.0)
    }

    /// Half stop at 0, barrier `X_t - X_1 >= c` on `(1, 2)`, stop all at 2.
    pub fn policy_with_barrier(c: f64) -> StoppingPolicy {
        StoppingPolicy::Composite(vec![
            StoppingPolicy::ScheduledMassStop(vec![(0.0, RandomizedStopRule::Constant(0.5))]),
            StoppingPolicy::NeverStop,
            StoppingPolicy::Barrier { t0: 1.0, c },
            StoppingPolicy::StopAll { time: HORIZON },
        ])
    }

    /// Pure policy of a density instance: keep `X_0 <= x0` at time 0, then as
    /// in [`Self::optimal_policy`].
    pub fn pure_policy(&self) -> Result<StoppingPolicy> {
        let ThresholdCurve::Density(d) = &self.curve else {
            return Err(Error::Input(
                "the pure policy needs an initial density".into(),
            ));
        };
        Ok(StoppingPolicy::Composite(vec![
            StoppingPolicy::ScheduledMassStop(vec![(
                0.0,
                RandomizedStopRule::Threshold {
                    threshold: d.median,
                    keep_below: true,
                },
            )]),
            StoppingPolicy::Barrier { t0: 1.0, c: 1.0 },
            StoppingPolicy::StopAll { time: HORIZON },
        ]))
    }
}

/// The running reward `F = -L u0 - (v0 - a)^+`, evaluated in one pass.
struct SmoothReward(Arc<SmoothInstance>);

impl RunningReward for SmoothReward {
    fn value(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.0.evaluate(t, m).running
    }

    fn value_and_groups(
        &self,
        t: f64,
        m: &StoppedEnsemble,
        groups: Option<&ParticleGroups>,
    ) -> (f64, Vec<f64>) {
        let Some(groups) = groups else {
            return (self.value(t, m), Vec::new());
        };
        let g = groups.count;
        let mut mass = vec![0.0; g];
        let mut v0 = vec![0.0; g];
        let mut curv = vec![0.0; g];
        for (k, (x, alive, w)) in m.particles().enumerate() {
            let j = groups.group_of[k] as usize;
            mass[j] += w;
            if alive {
                let e = psi(x[0]);
                v0[j] += w * e;
                curv[j] += w * (x[0] * x[0] - 1.0) * e;
            }
        }
        let full = self
            .0
            .evaluate_sums(t, v0.iter().sum(), curv.iter().sum())
            .running;
        let per_group = (0..g)
            .map(|j| {
                if mass[j] > 0.0 {
                    self.0
                        .evaluate_sums(t, v0[j] / mass[j], curv[j] / mass[j])
                        .running
                } else {
                    f64::NAN
                }
            })
            .collect();
        (full, per_group)
    }
}
