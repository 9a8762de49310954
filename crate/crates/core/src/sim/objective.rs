use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::StoppedEnsemble;
use crate::sim::engine::{simulate, SimConfig};
use crate::sim::flow::MeasureFlow;
use crate::sim::model::ModelSpec;
use crate::sim::policy::StoppingPolicy;

/// Minimum number of groups for a batch standard error.
pub const MIN_GROUPS: usize = 10;

/// Monte Carlo estimate of `int_0^T F(r, m_r) dr + g(m_T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub value: f64,
    /// Batch-means standard error, NaN when unavailable.
    pub stderr: f64,
    pub stderr_available: bool,
}

/// Left-endpoint quadrature of the running reward plus the terminal
/// reward, as collected while `flow` was simulated under `model`.
pub fn objective(flow: &MeasureFlow, model: &ModelSpec) -> Result<ObjectiveEstimate> {
    if model.running.is_none() && model.terminal.is_none() {
        return Err(Error::Config(
            "objective needs a running reward, a terminal reward, or both".into(),
        ));
    }
    let r = &flow.reward;
    let value = r.running.iter().sum::<f64>() * flow.dt + r.terminal;
    let g = r.group_totals.len();
    let finite = r.group_totals.iter().all(|v| v.is_finite());
    if g >= MIN_GROUPS && finite {
        let mean = r.group_totals.iter().sum::<f64>() / g as f64;
        let var = r
            .group_totals
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (g - 1) as f64;
        Ok(ObjectiveEstimate {
            value,
            stderr: (var / g as f64).sqrt(),
            stderr_available: true,
        })
    } else {
        Ok(ObjectiveEstimate {
            value,
            stderr: f64::NAN,
            stderr_available: false,
        })
    }
}

/// Outcome of a brute-force policy search.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_params: Vec<f64>,
    pub best_value: f64,
    /// `(params, estimate)` for every candidate, in input order.
    pub evaluations: Vec<(Vec<f64>, ObjectiveEstimate)>,
}

/// Maximises the objective over `candidates` of a parametrised policy
/// family, simulating every candidate with the same seed.
pub fn value_search<P>(
    model: &ModelSpec,
    family: P,
    candidates: &[Vec<f64>],
    m0: &StoppedEnsemble,
    cfg: &SimConfig,
) -> Result<SearchResult>
where
    P: Fn(&[f64]) -> StoppingPolicy,
{
    if candidates.is_empty() {
        return Err(Error::Config(
            "policy search needs at least one candidate".into(),
        ));
    }
    if candidates.iter().any(|c| c.len() > 3) {
        return Err(Error::Config(
            "policy families are limited to three parameters".into(),
        ));
    }
    let mut evaluations = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for (k, params) in candidates.iter().enumerate() {
        let flow = simulate(model, &family(params), m0, cfg.clone())?;
        let est = objective(&flow, model)?;
        evaluations.push((params.clone(), est));
        if est.value > evaluations[best].1.value {
            best = k;
        }
    }
    Ok(SearchResult {
        best_params: candidates[best].clone(),
        best_value: evaluations[best].1.value,
        evaluations,
    })
}

/// `n` evenly spaced one-parameter candidates on `[lo, hi]`.
pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![lo]];
    }
    (0..n)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
        .collect()
}
