//! The one-dimensional obstacle problem
//! `min{-(d_t v + L v), v - phi} = 0`, `v(T, .) = phi`, and its lift
//! `V(t, m) = int (v(t, x) i + phi(x) (1 - i)) m(dx, di)` to stopped laws.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::ensemble::{fmt_f64, interp_clamped};
use crate::measure::StoppedEnsemble;
use crate::sim::{objective, ModelSpec, ObjectiveEstimate, SimConfig, Simulation, StoppingPolicy};

/// Width of the band below which `v - phi` counts as stopping.
pub const REGION_BAND: f64 = 1e-9;

/// Largest fraction of surviving mass that may be clamped to the domain.
pub const MAX_CLAMPED_FRACTION: f64 = 0.01;

/// Relative gap below which a computed value is identified with the payoff.
const SNAP: f64 = 1e-13;

pub type ScalarField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Stopping payoff `phi`.
#[derive(Clone)]
pub enum Payoff {
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Piecewise linear through the nodes, constant beyond them.
    Tabulated {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
}

impl std::fmt::Debug for Payoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Function(_) => write!(f, "Function(..)"),
            Self::Tabulated { xs, .. } => write!(f, "Tabulated({} nodes)", xs.len()),
        }
    }
}

impl Payoff {
    pub fn function<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self::Function(Arc::new(f))
    }

    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::Input(
                "a tabulated payoff needs at least two (x, phi) pairs".into(),
            ));
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(
                "payoff nodes must be strictly increasing".into(),
            ));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "payoff table contains non-finite values".into(),
            ));
        }
        Ok(Self::Tabulated { xs, ys })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Function(f) => f(x),
            Self::Tabulated { xs, ys } => interp_clamped(xs, ys, x),
        }
    }

    /// Reads the two-column CSV `x,phi`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "phi" {
            return Err(Error::Input(format!(
                "expected header x,phi, found {:?}",
                headers
            )));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            xs.push(parse_field(&rec[0])?);
            ys.push(parse_field(&rec[1])?);
        }
        Self::tabulated(xs, ys)
    }
}

fn parse_field(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Input(format!("cannot parse {s:?} as a number")))
}

/// Space-time grid and solver limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObstacleSettings {
    pub horizon: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Number of space intervals.
    pub nx: usize,
    /// Number of time intervals.
    pub nt: usize,
    pub sigma_min: f64,
}

impl ObstacleSettings {
    pub fn new(horizon: f64, x_min: f64, x_max: f64, nx: usize, nt: usize) -> Self {
        Self {
            horizon,
            x_min,
            x_max,
            nx,
            nt,
            sigma_min: 1e-8,
        }
    }

    /// Domain covering the support of `m` widened by `6 sigma sqrt(T)`.
    pub fn around(m: &StoppedEnsemble, sigma: f64, horizon: f64, nx: usize, nt: usize) -> Self {
        let (lo, hi) = m
            .particles()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _, _)| {
                (lo.min(x[0]), hi.max(x[0]))
            });
        let pad = 6.0 * sigma * horizon.sqrt();
        Self::new(horizon, lo - pad, hi + pad, nx, nt)
    }
}

/// Discrete solution `v(t_k, x_j)` with its stopping region.
#[derive(Debug, Clone)]
pub struct ObstacleGrid {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    /// Row-major in time: `v[k * xs.len() + j]`.
    pub v: Vec<f64>,
    /// Continuation indicator `v - phi > REGION_BAND`.
    pub region: Vec<bool>,
    pub phi: Vec<f64>,
    pub payoff: Payoff,
    /// Largest `|min(A v - r, v - phi)|` over interior nodes.
    pub complementarity: f64,
    pub warnings: Vec<String>,
}

/// Tridiagonal rows `a_j v_{j-1} + d_j v_j + c_j v_{j+1} = r_j`.
struct Tridiagonal {
    a: Vec<f64>,
    d: Vec<f64>,
    c: Vec<f64>,
}

impl Tridiagonal {
    fn residual(&self, v: &[f64], r: &[f64], j: usize) -> f64 {
        let m = v.len();
        let mut s = self.d[j] * v[j] - r[j];
        if j > 0 {
            s += self.a[j] * v[j - 1];
        }
        if j + 1 < m {
            s += self.c[j] * v[j + 1];
        }
        s
    }

    fn complementarity(&self, v: &[f64], r: &[f64], phi: &[f64]) -> f64 {
        (0..v.len())
            .map(|j| self.residual(v, r, j).min(v[j] - phi[j]).abs())
            .fold(0.0, f64::max)
    }

    /// Exact when the stopping region is an initial segment.
    fn brennan_schwartz_low(&self, r: &[f64], phi: &[f64]) -> Vec<f64> {
        let m = r.len();
        let mut d = self.d.clone();
        let mut rr = r.to_vec();
        for j in (0..m - 1).rev() {
            let f = self.c[j] / d[j + 1];
            d[j] -= f * self.a[j + 1];
            rr[j] -= f * rr[j + 1];
        }
        let mut v = vec![0.0; m];
        v[0] = (rr[0] / d[0]).max(phi[0]);
        for j in 1..m {
            v[j] = ((rr[j] - self.a[j] * v[j - 1]) / d[j]).max(phi[j]);
        }
        v
    }

    /// Exact when the stopping region is a final segment.
    fn brennan_schwartz_high(&self, r: &[f64], phi: &[f64]) -> Vec<f64> {
        let m = r.len();
        let mut d = self.d.clone();
        let mut rr = r.to_vec();
        for j in 1..m {
            let f = self.a[j] / d[j - 1];
            d[j] -= f * self.c[j - 1];
            rr[j] -= f * rr[j - 1];
        }
        let mut v = vec![0.0; m];
        v[m - 1] = (rr[m - 1] / d[m - 1]).max(phi[m - 1]);
        for j in (0..m - 1).rev() {
            v[j] = ((rr[j] - self.c[j] * v[j + 1]) / d[j]).max(phi[j]);
        }
        v
    }

    /// Policy iteration on the two branches of the complementarity problem.
    fn howard(&self, mut v: Vec<f64>, r: &[f64], phi: &[f64]) -> Vec<f64> {
        let m = r.len();
        let mut active: Vec<bool> = (0..m)
            .map(|j| v[j] - phi[j] < self.residual(&v, r, j))
            .collect();
        for _ in 0..=m {
            let mut a = self.a.clone();
            let mut d = self.d.clone();
            let mut c = self.c.clone();
            let mut rr = r.to_vec();
            for j in 0..m {
                if active[j] {
                    a[j] = 0.0;
                    c[j] = 0.0;
                    d[j] = 1.0;
                    rr[j] = phi[j];
                }
            }
            v = thomas(&a, &d, &c, &rr);
            let next: Vec<bool> = (0..m)
                .map(|j| v[j] - phi[j] < self.residual(&v, r, j))
                .collect();
            if next == active {
                break;
            }
            active = next;
        }
        for (vj, pj) in v.iter_mut().zip(phi) {
            *vj = vj.max(*pj);
        }
        v
    }
}

fn thomas(a: &[f64], d: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let m = r.len();
    let mut cp = vec![0.0; m];
    let mut rp = vec![0.0; m];
    cp[0] = c[0] / d[0];
    rp[0] = r[0] / d[0];
    for j in 1..m {
        let den = d[j] - a[j] * cp[j - 1];
        cp[j] = c[j] / den;
        rp[j] = (r[j] - a[j] * rp[j - 1]) / den;
    }
    let mut v = vec![0.0; m];
    v[m - 1] = rp[m - 1];
    for j in (0..m - 1).rev() {
        v[j] = rp[j] - cp[j] * v[j + 1];
    }
    v
}

/// Backward implicit Euler with central differences; each step solves the
/// complementarity problem by Brennan-Schwartz, swept in both directions,
/// with policy iteration as a fallback when neither sweep is exact.
pub fn solve_obstacle(
    b: &dyn Fn(f64, f64) -> f64,
    sigma: &dyn Fn(f64, f64) -> f64,
    payoff: &Payoff,
    settings: &ObstacleSettings,
) -> Result<ObstacleGrid> {
    let ObstacleSettings {
        horizon,
        x_min,
        x_max,
        nx,
        nt,
        sigma_min,
    } = *settings;
    if nx < 32 || nt < 32 {
        return Err(Error::Config(format!(
            "grid {nx} x {nt} is below the minimum 32 x 32"
        )));
    }
    if !(x_min < x_max) || !(horizon > 0.0) {
        return Err(Error::Config(format!(
            "invalid domain [{x_min}, {x_max}] or horizon {horizon}"
        )));
    }
    let dx = (x_max - x_min) / nx as f64;
    let dt = horizon / nt as f64;
    let xs: Vec<f64> = (0..=nx).map(|j| x_min + j as f64 * dx).collect();
    let ts: Vec<f64> = (0..=nt).map(|k| k as f64 * dt).collect();
    let phi: Vec<f64> = xs.iter().map(|&x| payoff.eval(x)).collect();
    if let Some(j) = phi.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFiniteEvaluation {
            index: j,
            value: phi[j],
        });
    }
    let width = nx + 1;
    let m = nx - 1;
    let mut v = vec![0.0; (nt + 1) * width];
    v[nt * width..].copy_from_slice(&phi);
    let mut warnings = Vec::new();
    let mut complementarity: f64 = 0.0;
    let inner_phi = &phi[1..nx];
    for k in (0..nt).rev() {
        let t = ts[k];
        let mut sys = Tridiagonal {
            a: vec![0.0; m],
            d: vec![0.0; m],
            c: vec![0.0; m],
        };
        let mut r = vec![0.0; m];
        let mut dominant = true;
        for j in 0..m {
            let x = xs[j + 1];
            let s = sigma(t, x);
            if !(s >= sigma_min) {
                return Err(Error::Ellipticity {
                    sigma: s,
                    min: sigma_min,
                    t,
                    x,
                });
            }
            let drift = b(t, x);
            if !drift.is_finite() {
                return Err(Error::NonFiniteEvaluation {
                    index: j + 1,
                    value: drift,
                });
            }
            let diff = 0.5 * s * s / (dx * dx);
            let adv = drift / (2.0 * dx);
            sys.a[j] = -(diff - adv);
            sys.c[j] = -(diff + adv);
            sys.d[j] = 1.0 / dt + 2.0 * diff;
            dominant &= diff >= adv.abs();
            r[j] = v[(k + 1) * width + j + 1] / dt;
        }
        if !dominant {
            warnings.push(format!(
                "t={t}: drift dominates diffusion, the implicit system is not an M-matrix"
            ));
        }
        r[0] -= sys.a[0] * phi[0];
        r[m - 1] -= sys.c[m - 1] * phi[nx];
        sys.a[0] = 0.0;
        sys.c[m - 1] = 0.0;
        let low = sys.brennan_schwartz_low(&r, inner_phi);
        let high = sys.brennan_schwartz_high(&r, inner_phi);
        let (res_low, res_high) = (
            sys.complementarity(&low, &r, inner_phi),
            sys.complementarity(&high, &r, inner_phi),
        );
        let (mut sol, mut res) = if res_low <= res_high {
            (low, res_low)
        } else {
            (high, res_high)
        };
        let scale = 1e-10 * (1.0 + r.iter().fold(0.0f64, |acc, x| acc.max(x.abs())));
        if res > scale {
            sol = sys.howard(sol, &r, inner_phi);
            res = sys.complementarity(&sol, &r, inner_phi);
        }
        for (vj, pj) in sol.iter_mut().zip(inner_phi) {
            if *vj - pj <= SNAP * (1.0 + pj.abs()) {
                *vj = *pj;
            }
        }
        complementarity = complementarity.max(res * dt);
        let row = &mut v[k * width..(k + 1) * width];
        row[0] = phi[0];
        row[nx] = phi[nx];
        row[1..nx].copy_from_slice(&sol);
    }
    let region = v
        .iter()
        .enumerate()
        .map(|(idx, val)| val - phi[idx % width] > REGION_BAND)
        .collect();
    Ok(ObstacleGrid {
        xs,
        ts,
        v,
        region,
        phi,
        payoff: payoff.clone(),
        complementarity,
        warnings,
    })
}

impl ObstacleGrid {
    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.ts.last().expect("non-empty time grid")
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().expect("non-empty space grid"))
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.v[k * self.width()..(k + 1) * self.width()]
    }

    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.v[k * self.width() + j]
    }

    fn slice_value(&self, k: usize, x: f64) -> f64 {
        interp_clamped(&self.xs, self.slice(k), x)
    }

    fn time_bracket(&self, t: f64) -> (usize, f64) {
        let nt = self.ts.len() - 1;
        let s = (t / self.horizon() * nt as f64).clamp(0.0, nt as f64);
        let k = (s.floor() as usize).min(nt.saturating_sub(1));
        (k, s - k as f64)
    }

    /// `v(t, x)`, linear in both variables, clamped to the domain.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let (k, f) = self.time_bracket(t);
        let lo = self.slice_value(k, x);
        if f == 0.0 {
            return lo;
        }
        (1.0 - f) * lo + f * self.slice_value(k + 1, x)
    }

    fn nearest_slice(&self, t: f64) -> usize {
        let nt = self.ts.len() - 1;
        ((t / self.horizon() * nt as f64).round().max(0.0) as usize).min(nt)
    }

    /// Whether `(t, x)` lies in the continuation region, read on the nearest
    /// time slice.
    pub fn region_at(&self, t: f64, x: f64) -> bool {
        let (lo, hi) = self.domain();
        if !(lo..=hi).contains(&x) {
            return false;
        }
        let k = self.nearest_slice(t);
        self.slice_value(k, x) - interp_clamped(&self.xs, &self.phi, x) > REGION_BAND
    }

    /// `V(t, m) = sum w (v(t, x) i + phi(x) (1 - i))`.
    pub fn lift_value(&self, t: f64, m: &StoppedEnsemble) -> Result<f64> {
        Ok(self.lift_terms(t, m)?.iter().sum())
    }

    /// The per-particle terms of [`Self::lift_value`].
    pub fn lift_terms(&self, t: f64, m: &StoppedEnsemble) -> Result<Vec<f64>> {
        if m.dim() != 1 {
            return Err(Error::Input(format!(
                "the lift needs a one-dimensional law, got dimension {}",
                m.dim()
            )));
        }
        let (lo, hi) = self.domain();
        let mut clamped = 0.0;
        let terms = m
            .particles()
            .map(|(x, alive, w)| {
                let x = x[0];
                if !alive {
                    return w * self.payoff.eval(x);
                }
                if !(lo..=hi).contains(&x) {
                    clamped += w;
                }
                w * self.value(t, x)
            })
            .collect();
        if clamped > MAX_CLAMPED_FRACTION {
            return Err(Error::DomainCoverage {
                fraction: clamped,
                lo,
                hi,
            });
        }
        Ok(terms)
    }

    /// Writes `t,x,v,region` with one row per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "v", "region"])?;
        let width = self.width();
        for (k, t) in self.ts.iter().enumerate() {
            for (j, x) in self.xs.iter().enumerate() {
                let idx = k * width + j;
                w.write_record([
                    fmt_f64(*t),
                    fmt_f64(*x),
                    fmt_f64(self.v[idx]),
                    u8::from(self.region[idx]).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`Self::write_csv`]; the payoff is taken
    /// from the terminal slice.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "x", "v", "region"] {
            return Err(Error::Input(format!(
                "expected header t,x,v,region, found {:?}",
                headers
            )));
        }
        let (mut ts, mut xs, mut v, mut region) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let t = parse_field(&rec[0])?;
            let x = parse_field(&rec[1])?;
            if ts.last() != Some(&t) {
                ts.push(t);
            }
            if ts.len() == 1 {
                xs.push(x);
            }
            v.push(parse_field(&rec[2])?);
            region.push(match &rec[3] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Input(format!("region flag {other:?} is not 0 or 1"))),
            });
        }
        if xs.len() < 2 || ts.len() < 2 || v.len() != xs.len() * ts.len() {
            return Err(Error::Input(
                "grid CSV is not a complete rectangular grid".into(),
            ));
        }
        let phi = v[(ts.len() - 1) * xs.len()..].to_vec();
        let payoff = Payoff::tabulated(xs.clone(), phi.clone())?;
        Ok(Self {
            xs,
            ts,
            v,
            region,
            phi,
            payoff,
            complementarity: f64::NAN,
            warnings: Vec::new(),
        })
    }
}

/// Decoupled model `dX = b dt + sigma dW` with terminal reward `m[phi]`
/// over all mass and no running reward.
pub fn payoff_model(b: ScalarField, sigma: ScalarField, payoff: Payoff) -> ModelSpec {
    ModelSpec::scalar(move |t, x, _| b(t, x), move |t, x, _| sigma(t, x)).with_terminal(
        move |m: &StoppedEnsemble| {
            m.particles()
                .map(|(x, _, w)| w * payoff.eval(x[0]))
                .sum::<f64>()
        },
    )
}

/// Stop as soon as `v(t, X_t) = phi(X_t)`.
pub fn pure_region_policy(grid: Arc<ObstacleGrid>) -> StoppingPolicy {
    StoppingPolicy::region(move |t, x, _| grid.region_at(t, x[0]))
}

/// One-stage value against the two-stage value at an intermediate time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DppReport {
    pub s: f64,
    /// Objective of the region policy simulated on `[0, T]`.
    pub one_stage: ObjectiveEstimate,
    /// `V(0, m0)` from the grid.
    pub lifted_initial: f64,
    /// Running reward on `[0, s]` plus `V(s, m_s)`.
    pub two_stage: f64,
    pub two_stage_stderr: f64,
}

/// Checks the dynamic programming principle for a decoupled model whose
/// value is the lift of `grid`, following the region policy to time `s`.
pub fn dpp_check(
    grid: Arc<ObstacleGrid>,
    model: &ModelSpec,
    m0: &StoppedEnsemble,
    s: f64,
    cfg: SimConfig,
) -> Result<DppReport> {
    let policy = pure_region_policy(grid.clone());
    let lifted_initial = grid.lift_value(0.0, m0)?;
    let one_flow = Simulation::new(model, &policy, m0, cfg.clone())?.run(&mut [])?;
    let one_stage = objective(&one_flow, model)?;
    let s_step = cfg.step_of(s);
    let mut sim = Simulation::new(model, &policy, m0, cfg)?;
    let mut running = 0.0;
    while sim.current_step() < s_step {
        running += model.running_value(sim.current_time(), sim.state()) * sim.config().dt();
        sim.step_with(None, &mut [])?;
    }
    let t_s = sim.current_time();
    // equal-weight particles: the stderr of sum w y is sd(w y) sqrt(n)
    let terms = grid.lift_terms(t_s, sim.state())?;
    let n = terms.len() as f64;
    let two_stage = running + terms.iter().sum::<f64>();
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(DppReport {
        s: t_s,
        one_stage,
        lifted_initial,
        two_stage,
        two_stage_stderr: var.sqrt() * n.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brownian_grid(payoff: Payoff, n: usize) -> ObstacleGrid {
        solve_obstacle(
            &|_, _| 0.0,
            &|_, _| 1.0,
            &payoff,
            &ObstacleSettings::new(1.0, -6.0, 6.0, n, n),
        )
        .unwrap()
    }

    #[test]
    fn constant_payoff_is_exact() {
        let g = brownian_grid(Payoff::function(|_| 1.5), 64);
        assert!(g.v.iter().all(|v| *v == 1.5));
        assert!(g.region.iter().all(|r| !r));
    }

    #[test]
    fn thomas_solves_tridiagonal_system() {
        let a = [0.0, -1.0, -1.0];
        let d = [4.0, 4.0, 4.0];
        let c = [-1.0, -1.0, 0.0];
        let r = [3.0, 2.0, 3.0];
        let v = thomas(&a, &d, &c, &r);
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn small_grids_are_rejected() {
        let err = solve_obstacle(
            &|_, _| 0.0,
            &|_, _| 1.0,
            &Payoff::function(|x| x),
            &ObstacleSettings::new(1.0, -1.0, 1.0, 16, 64),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn degenerate_diffusion_is_rejected() {
        let err = solve_obstacle(
            &|_, _| 0.0,
            &|_, x| x.abs(),
            &Payoff::function(|x| x),
            &ObstacleSettings::new(1.0, -1.0, 1.0, 32, 32),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Ellipticity { .. }));
    }

    #[test]
    fn strong_drift_is_flagged() {
        let g = solve_obstacle(
            &|_, _| 50.0,
            &|_, _| 0.1,
            &Payoff::function(|x| -x * x),
            &ObstacleSettings::new(1.0, -1.0, 1.0, 32, 32),
        )
        .unwrap();
        assert!(!g.warnings.is_empty());
    }

    #[test]
    fn payoff_csv_parses() {
        let p = Payoff::read_csv("x,phi\n0,1\n1,3\n".as_bytes()).unwrap();
        assert_eq!(p.eval(0.5), 2.0);
        assert_eq!(p.eval(-4.0), 1.0);
        assert!(Payoff::read_csv("x,y\n0,1\n".as_bytes()).is_err());
    }
}
