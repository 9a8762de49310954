//! Convex-dual reduction of `E[psi(X_tau)] + phi(E[h(X_tau)])`.
//!
//! With `phi*(alpha) = sup_beta {alpha beta - phi(beta)}` and
//! `psi_alpha = psi + alpha h`, the value is
//! `sup_alpha [-phi*(alpha) + V_alpha(t, m)]`, where `V_alpha` is the lift of
//! the standard obstacle problem with payoff `psi_alpha`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::StoppedEnsemble;
use crate::obstacle::{pure_region_policy, solve_obstacle, ObstacleGrid, ObstacleSettings, Payoff};
use crate::quadrature::golden_section_max;
use crate::sim::{ModelSpec, StoppingPolicy};

pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Half-width and size of the grid used for numerical Legendre transforms.
pub const CONJUGATE_RANGE: f64 = 32.0;
pub const CONJUGATE_POINTS: usize = 4096;

/// Which squared-mean weight a mean-variance criterion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanVariance {
    /// `E[X] - Var(X) / 2`, so `phi(beta) = beta^2 / 2`.
    Standard,
    /// `int (x - x^2/2) + (int x)^2`, so `phi(beta) = beta^2`.
    SquaredMean,
}

/// A criterion `E[psi(X)] + phi(E[h(X)])` with its dual search settings.
#[derive(Clone)]
pub struct DualCriterion {
    pub psi: RealFn,
    pub h: RealFn,
    pub phi: RealFn,
    /// Closed-form conjugate; computed on a grid when absent.
    pub phi_star: Option<RealFn>,
    pub alpha_range: (f64, f64),
    pub alpha_points: usize,
    pub golden_tol: f64,
}

impl DualCriterion {
    pub fn new<P, H, F>(psi: P, h: H, phi: F) -> Self
    where
        P: Fn(f64) -> f64 + Send + Sync + 'static,
        H: Fn(f64) -> f64 + Send + Sync + 'static,
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            psi: Arc::new(psi),
            h: Arc::new(h),
            phi: Arc::new(phi),
            phi_star: None,
            alpha_range: (-8.0, 8.0),
            alpha_points: 64,
            golden_tol: 1e-6,
        }
    }

    pub fn with_conjugate<F: Fn(f64) -> f64 + Send + Sync + 'static>(mut self, f: F) -> Self {
        self.phi_star = Some(Arc::new(f));
        self
    }

    pub fn with_alpha_grid(mut self, lo: f64, hi: f64, n: usize) -> Self {
        self.alpha_range = (lo, hi);
        self.alpha_points = n;
        self
    }

    pub fn mean_variance(kind: MeanVariance) -> Self {
        match kind {
            MeanVariance::Standard => Self::new(|x| x - 0.5 * x * x, |x| x, |b| 0.5 * b * b)
                .with_conjugate(|a| 0.5 * a * a),
            MeanVariance::SquaredMean => {
                Self::new(|x| x - 0.5 * x * x, |x| x, |b| b * b).with_conjugate(|a| 0.25 * a * a)
            }
        }
    }

    /// `phi*(alpha)`.
    pub fn conjugate(&self, alpha: f64) -> f64 {
        if let Some(f) = &self.phi_star {
            return f(alpha);
        }
        let step = 2.0 * CONJUGATE_RANGE / CONJUGATE_POINTS as f64;
        (0..=CONJUGATE_POINTS)
            .map(|j| {
                let beta = -CONJUGATE_RANGE + j as f64 * step;
                alpha * beta - (self.phi)(beta)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `phi**(beta) - phi(beta)` over `betas`, with `phi**` taken
    /// over the alpha grid.
    pub fn biconjugate_excess(&self, betas: &[f64]) -> f64 {
        let conj: Vec<(f64, f64)> = self
            .alpha_grid()
            .into_iter()
            .map(|a| (a, self.conjugate(a)))
            .collect();
        betas
            .iter()
            .map(|&b| {
                let bi = conj
                    .iter()
                    .map(|(a, c)| a * b - c)
                    .fold(f64::NEG_INFINITY, f64::max);
                bi - (self.phi)(b)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn alpha_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.alpha_range;
        let n = self.alpha_points.max(2);
        (0..n)
            .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
            .collect()
    }

    /// `psi_alpha = psi + alpha h`.
    pub fn payoff(&self, alpha: f64) -> Payoff {
        let (psi, h) = (self.psi.clone(), self.h.clone());
        Payoff::function(move |x| psi(x) + alpha * h(x))
    }

    /// The primal criterion on a terminal law, over all mass.
    pub fn evaluate(&self, m: &StoppedEnsemble) -> f64 {
        let (mut e_psi, mut e_h) = (0.0, 0.0);
        for (x, _, w) in m.particles() {
            e_psi += w * (self.psi)(x[0]);
            e_h += w * (self.h)(x[0]);
        }
        e_psi + (self.phi)(e_h)
    }
}

/// Decoupled one-dimensional dynamics `dX = b(t, X) dt + sigma(t, X) dW`.
#[derive(Clone)]
pub struct DecoupledModel {
    pub b: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub sigma: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl DecoupledModel {
    pub fn new<B, S>(b: B, sigma: S) -> Self
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            b: Arc::new(b),
            sigma: Arc::new(sigma),
        }
    }

    pub fn brownian() -> Self {
        Self::new(|_, _| 0.0, |_, _| 1.0)
    }

    pub fn solve(&self, payoff: &Payoff, settings: &ObstacleSettings) -> Result<ObstacleGrid> {
        solve_obstacle(self.b.as_ref(), self.sigma.as_ref(), payoff, settings)
    }

    /// Particle model whose terminal reward is `crit` over all mass.
    pub fn with_criterion(&self, crit: &DualCriterion) -> ModelSpec {
        let (b, sigma, crit) = (self.b.clone(), self.sigma.clone(), crit.clone());
        ModelSpec::scalar(move |t, x, _| b(t, x), move |t, x, _| sigma(t, x))
            .with_terminal(move |m: &StoppedEnsemble| crit.evaluate(m))
    }
}

/// One alpha of the dual search.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlphaSlice {
    pub alpha: f64,
    pub conjugate: f64,
    pub v_alpha: f64,
    pub dual_objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualResult {
    pub value: f64,
    pub alpha_star: f64,
    pub per_alpha: Vec<AlphaSlice>,
}

fn slice(
    crit: &DualCriterion,
    model: &DecoupledModel,
    t: f64,
    m: &StoppedEnsemble,
    settings: &ObstacleSettings,
    alpha: f64,
) -> Result<AlphaSlice> {
    let grid = model.solve(&crit.payoff(alpha), settings)?;
    let v_alpha = grid.lift_value(t, m)?;
    let conjugate = crit.conjugate(alpha);
    Ok(AlphaSlice {
        alpha,
        conjugate,
        v_alpha,
        dual_objective: v_alpha - conjugate,
    })
}

/// `sup_alpha [-phi*(alpha) + V_alpha(t, m)]` by a grid scan refined with
/// golden-section search on the bracket of the best grid point.
pub fn dual_value(
    crit: &DualCriterion,
    model: &DecoupledModel,
    t: f64,
    m: &StoppedEnsemble,
    settings: &ObstacleSettings,
) -> Result<DualResult> {
    let alphas = crit.alpha_grid();
    let per_alpha = alphas
        .par_iter()
        .map(|&a| slice(crit, model, t, m, settings, a))
        .collect::<Result<Vec<_>>>()?;
    let best = per_alpha.iter().enumerate().fold(0, |b, (k, s)| {
        if s.dual_objective > per_alpha[b].dual_objective {
            k
        } else {
            b
        }
    });
    if best == 0 || best == per_alpha.len() - 1 {
        return Err(Error::SearchInterval {
            alpha: alphas[best],
        });
    }
    let (alpha_star, value) = golden_section_max(
        |a| slice(crit, model, t, m, settings, a).map(|s| s.dual_objective),
        alphas[best - 1],
        alphas[best + 1],
        crit.golden_tol,
    )?;
    let (alpha_star, value) = if value >= per_alpha[best].dual_objective {
        (alpha_star, value)
    } else {
        (alphas[best], per_alpha[best].dual_objective)
    };
    Ok(DualResult {
        value,
        alpha_star,
        per_alpha,
    })
}

/// The region policy of the `alpha*` obstacle problem.
pub fn optimal_policy_for_dual(
    crit: &DualCriterion,
    model: &DecoupledModel,
    settings: &ObstacleSettings,
    alpha_star: f64,
) -> Result<StoppingPolicy> {
    let grid = model.solve(&crit.payoff(alpha_star), settings)?;
    Ok(pure_region_policy(Arc::new(grid)))
}
