use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::CompensatedSum;
use crate::rng::{CounterRng, StreamTag};

/// Tolerance used when merging coincident particles.
pub const MERGE_TOL: f64 = 1e-14;

/// One atom `(x, i, w)` of a measure on `R^d x {0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub x: Vec<f64>,
    pub alive: bool,
    pub weight: f64,
}

impl Particle {
    pub fn new(x: Vec<f64>, alive: bool, weight: f64) -> Self {
        Self { x, alive, weight }
    }

    pub fn scalar(x: f64, alive: bool, weight: f64) -> Self {
        Self {
            x: vec![x],
            alive,
            weight,
        }
    }
}

/// Weighted particle approximation of a law on `R^d x {0, 1}`.
///
/// Positions are stored flat (`x[k * dim .. (k + 1) * dim]`). The survival
/// flag `alive` is the `i` coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppedEnsemble {
    dim: usize,
    x: Vec<f64>,
    alive: Vec<bool>,
    w: Vec<f64>,
}

impl StoppedEnsemble {
    pub fn new(dim: usize, particles: Vec<Particle>) -> Result<Self> {
        let mut x = Vec::with_capacity(particles.len() * dim);
        let mut alive = Vec::with_capacity(particles.len());
        let mut w = Vec::with_capacity(particles.len());
        for (k, p) in particles.into_iter().enumerate() {
            if p.x.len() != dim {
                return Err(Error::InvalidEnsemble(format!(
                    "particle {k} has dimension {}, expected {dim}",
                    p.x.len()
                )));
            }
            x.extend_from_slice(&p.x);
            alive.push(p.alive);
            w.push(p.weight);
        }
        Self::from_parts(dim, x, alive, w)
    }

    /// Builds an ensemble from flat storage and checks every invariant.
    pub fn from_parts(dim: usize, x: Vec<f64>, alive: Vec<bool>, w: Vec<f64>) -> Result<Self> {
        let ens = Self { dim, x, alive, w };
        ens.validate()?;
        Ok(ens)
    }

    pub(crate) fn from_parts_unchecked(
        dim: usize,
        x: Vec<f64>,
        alive: Vec<bool>,
        w: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(x.len(), alive.len() * dim);
        debug_assert_eq!(w.len(), alive.len());
        Self { dim, x, alive, w }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidEnsemble("dimension must be positive".into()));
        }
        if self.alive.is_empty() {
            return Err(Error::InvalidEnsemble("particle list is empty".into()));
        }
        if self.x.len() != self.alive.len() * self.dim || self.w.len() != self.alive.len() {
            return Err(Error::InvalidEnsemble(
                "inconsistent storage lengths".into(),
            ));
        }
        if let Some(k) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEnsemble(format!(
                "particle {} has a non-finite position",
                k / self.dim
            )));
        }
        if let Some(k) = self.w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidEnsemble(format!(
                "particle {k} has invalid weight {}",
                self.w[k]
            )));
        }
        let total: f64 = self.w.iter().sum();
        let tol = 1e-12 + self.w.len() as f64 * f64::EPSILON;
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidEnsemble(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// The Dirac mass at `(x, alive)`.
    pub fn dirac(x: &[f64], alive: bool) -> Self {
        Self {
            dim: x.len(),
            x: x.to_vec(),
            alive: vec![alive],
            w: vec![1.0],
        }
    }

    /// Equal-weight one-dimensional ensemble with a common survival flag.
    pub fn uniform_1d(points: &[f64], alive: bool) -> Result<Self> {
        let n = points.len();
        Self::from_parts(1, points.to_vec(), vec![alive; n], vec![1.0 / n as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    #[inline]
    pub fn position(&self, k: usize) -> &[f64] {
        &self.x[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn is_alive(&self, k: usize) -> bool {
        self.alive[k]
    }

    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        self.w[k]
    }

    pub fn positions(&self) -> &[f64] {
        &self.x
    }

    pub fn flags(&self) -> &[bool] {
        &self.alive
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<bool>, &mut Vec<f64>) {
        (&mut self.x, &mut self.alive, &mut self.w)
    }

    pub fn particles(&self) -> impl Iterator<Item = (&[f64], bool, f64)> + '_ {
        (0..self.len()).map(move |k| (self.position(k), self.alive[k], self.w[k]))
    }

    pub fn to_particles(&self) -> Vec<Particle> {
        self.particles()
            .map(|(x, i, w)| Particle::new(x.to_vec(), i, w))
            .collect()
    }

    /// `m[psi] = sum_k w_k psi(x_k, i_k)`.
    pub fn expectation<F>(&self, psi: F) -> Result<f64>
    where
        F: Fn(&[f64], bool) -> f64,
    {
        let mut acc = 0.0;
        for (k, (x, i, w)) in self.particles().enumerate() {
            let v = psi(x, i);
            if !v.is_finite() {
                return Err(Error::NonFiniteEvaluation { index: k, value: v });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// `m[psi]` without the finiteness check, for hot loops.
    pub(crate) fn expectation_unchecked<F>(&self, psi: F) -> f64
    where
        F: Fn(&[f64], bool) -> f64,
    {
        self.particles().map(|(x, i, w)| w * psi(x, i)).sum()
    }

    /// Survival mass `m(R^d, 1)`.
    pub fn survival_mass(&self) -> f64 {
        self.alive
            .iter()
            .zip(&self.w)
            .filter(|(a, _)| **a)
            .map(|(_, w)| *w)
            .sum::<CompensatedSum>()
            .value()
    }

    /// Mean and variance of the first coordinate under the normalised
    /// surviving mass. NaN when nothing survives.
    pub fn survivor_moments(&self) -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for k in 0..self.len() {
            if self.alive[k] {
                let x = self.x[k * self.dim];
                let w = self.w[k];
                s0 += w;
                s1 += w * x;
                s2 += w * x * x;
            }
        }
        if s0 <= 0.0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = s1 / s0;
        (mean, (s2 / s0 - mean * mean).max(0.0))
    }

    /// Stops a proportion `1 - p(x)` of the surviving mass.
    ///
    /// Weight splitting yields `m' <= m` in the stopping order exactly and
    /// merges coincident atoms; Bernoulli mode flips each survivor
    /// independently.
    pub fn apply_randomized_stop(
        &self,
        rule: &RandomizedStopRule,
        mode: SplitMode,
    ) -> Result<Self> {
        match mode {
            SplitMode::WeightSplit => {
                let mut out = self.weight_split(rule)?;
                out = out.merge_duplicates();
                Ok(out)
            }
            SplitMode::Bernoulli { seed } => {
                let mut alive = self.alive.clone();
                for k in 0..self.len() {
                    if !alive[k] {
                        continue;
                    }
                    let p = rule.survival(self.position(k))?;
                    let u = CounterRng::new(seed, k as u64, 0, StreamTag::Bernoulli).uniform();
                    alive[k] = u < p;
                }
                Ok(Self::from_parts_unchecked(
                    self.dim,
                    self.x.clone(),
                    alive,
                    self.w.clone(),
                ))
            }
        }
    }

    /// Weight split without merging; children of particle `k` keep index `k`
    /// for the surviving part and the stopped part is appended.
    pub(crate) fn weight_split(&self, rule: &RandomizedStopRule) -> Result<Self> {
        let mut x = self.x.clone();
        let mut alive = self.alive.clone();
        let mut w = self.w.clone();
        for k in 0..self.len() {
            if !self.alive[k] {
                continue;
            }
            let p = rule.survival(self.position(k))?;
            let wk = self.w[k];
            if p >= 1.0 {
                continue;
            }
            if p <= 0.0 {
                alive[k] = false;
                continue;
            }
            w[k] = wk * p;
            x.extend_from_slice(self.position(k));
            alive.push(false);
            w.push(wk * (1.0 - p));
        }
        let mut out = Self::from_parts_unchecked(self.dim, x, alive, w);
        out.drop_zero_weights();
        Ok(out)
    }

    fn drop_zero_weights(&mut self) {
        if self.w.iter().all(|w| *w > 0.0) {
            return;
        }
        let dim = self.dim;
        let keep: Vec<usize> = (0..self.len()).filter(|&k| self.w[k] > 0.0).collect();
        if keep.is_empty() {
            return;
        }
        let x = keep
            .iter()
            .flat_map(|&k| self.x[k * dim..(k + 1) * dim].iter().copied())
            .collect();
        let alive = keep.iter().map(|&k| self.alive[k]).collect();
        let w = keep.iter().map(|&k| self.w[k]).collect();
        *self = Self::from_parts_unchecked(dim, x, alive, w);
    }

    /// Merges atoms whose `(x, i)` agree to within [`MERGE_TOL`]. The order
    /// of first occurrence is preserved.
    pub fn merge_duplicates(&self) -> Self {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.alive[a]
                .cmp(&self.alive[b])
                .then_with(|| {
                    self.position(a)
                        .partial_cmp(self.position(b))
                        .expect("finite positions")
                })
                .then(a.cmp(&b))
        });
        // every particle points at the first-occurring member of its cluster
        let mut rep: Vec<usize> = (0..n).collect();
        let mut start = 0;
        while start < n {
            let head = order[start];
            let mut end = start + 1;
            while end < n
                && self.alive[order[end]] == self.alive[head]
                && self
                    .position(head)
                    .iter()
                    .zip(self.position(order[end]))
                    .all(|(u, v)| (u - v).abs() <= MERGE_TOL)
            {
                end += 1;
            }
            let first = order[start..end]
                .iter()
                .copied()
                .min()
                .expect("non-empty cluster");
            for &k in &order[start..end] {
                rep[k] = first;
            }
            start = end;
        }
        let mut slot = vec![usize::MAX; n];
        let mut x = Vec::new();
        let mut alive = Vec::new();
        let mut w: Vec<f64> = Vec::new();
        for k in 0..n {
            let r = rep[k];
            if slot[r] == usize::MAX {
                slot[r] = alive.len();
                x.extend_from_slice(self.position(r));
                alive.push(self.alive[r]);
                w.push(0.0);
            }
            w[slot[r]] += self.w[k];
        }
        Self::from_parts_unchecked(self.dim, x, alive, w)
    }

    /// The mixture `lambda * other + (1 - lambda) * self`, atoms concatenated.
    pub fn mix_with(&self, other: &Self, lambda: f64) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::InvalidEnsemble(
                "mixture of ensembles with different dimensions".into(),
            ));
        }
        let mut x = self.x.clone();
        x.extend_from_slice(&other.x);
        let mut alive = self.alive.clone();
        alive.extend_from_slice(&other.alive);
        let mut w: Vec<f64> = self.w.iter().map(|v| v * (1.0 - lambda)).collect();
        w.extend(other.w.iter().map(|v| v * lambda));
        Ok(Self::from_parts_unchecked(self.dim, x, alive, w))
    }

    /// Sub-ensemble of the given indices with renormalised weights, or
    /// `None` if they carry no mass.
    pub fn restrict(&self, indices: &[usize]) -> Option<Self> {
        let total: f64 = indices.iter().map(|&k| self.w[k]).sum();
        if total <= 0.0 {
            return None;
        }
        let x = indices
            .iter()
            .flat_map(|&k| self.position(k).iter().copied())
            .collect();
        let alive = indices.iter().map(|&k| self.alive[k]).collect();
        let w = indices.iter().map(|&k| self.w[k] / total).collect();
        Some(Self::from_parts_unchecked(self.dim, x, alive, w))
    }

    /// Writes the `x0,...,x{d-1},i,w` CSV format with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("i".into());
        header.push("w".into());
        wtr.write_record(&header)?;
        for (x, i, w) in self.particles() {
            let mut rec: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(if i { "1".into() } else { "0".into() });
            rec.push(fmt_f64(w));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let n_cols = header.len();
        if n_cols < 3 || &header[n_cols - 2] != "i" || &header[n_cols - 1] != "w" {
            return Err(Error::Input(
                "ensemble CSV header must be x0,...,x{d-1},i,w".into(),
            ));
        }
        let dim = n_cols - 2;
        for (j, name) in header.iter().take(dim).enumerate() {
            if name != format!("x{j}") {
                return Err(Error::Input(format!(
                    "unexpected column '{name}', expected x{j}"
                )));
            }
        }
        let mut x = Vec::new();
        let mut alive = Vec::new();
        let mut w = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for j in 0..dim {
                x.push(parse_f64(&rec[j])?);
            }
            alive.push(match rec[dim].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Input(format!(
                        "survival flag must be 0 or 1, got '{other}'"
                    )))
                }
            });
            w.push(parse_f64(&rec[dim + 1])?);
        }
        Self::from_parts(dim, x, alive, w)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Input(format!("bad number '{s}': {e}")))
}

/// How a randomized stop is realised on an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    WeightSplit,
    Bernoulli { seed: u64 },
}

/// Survival probability `p(x)` applied to the surviving mass.
#[derive(Clone)]
pub enum RandomizedStopRule {
    Constant(f64),
    /// Survive iff `x[0] <= threshold` (or `>`, when `keep_below` is false).
    Threshold {
        threshold: f64,
        keep_below: bool,
    },
    /// Piecewise-linear in `x[0]`, flat outside the table.
    Tabulated {
        xs: Vec<f64>,
        ps: Vec<f64>,
    },
    Function(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for RandomizedStopRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(p) => write!(f, "Constant({p})"),
            Self::Threshold {
                threshold,
                keep_below,
            } => {
                write!(
                    f,
                    "Threshold {{ threshold: {threshold}, keep_below: {keep_below} }}"
                )
            }
            Self::Tabulated { xs, .. } => write!(f, "Tabulated({} nodes)", xs.len()),
            Self::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl RandomizedStopRule {
    pub fn function<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::Function(Arc::new(f))
    }

    pub fn tabulated(xs: Vec<f64>, ps: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ps.len() || xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(
                "tabulated rule needs strictly increasing nodes and matching values".into(),
            ));
        }
        Ok(Self::Tabulated { xs, ps })
    }

    /// Survival probability at `x`, checked to lie in `[0, 1]`.
    pub fn survival(&self, x: &[f64]) -> Result<f64> {
        let p = match self {
            Self::Constant(p) => *p,
            Self::Threshold {
                threshold,
                keep_below,
            } => {
                let below = x[0] <= *threshold;
                if below == *keep_below {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tabulated { xs, ps } => interp_clamped(xs, ps, x[0]),
            Self::Function(f) => f(x),
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "survival probability {p} outside [0, 1] at x={x:?}"
            )));
        }
        Ok(p)
    }

    /// `p` then `q` composes to `p * q` under weight splitting.
    pub fn compose(&self, other: &Self) -> Self {
        let a = self.clone();
        let b = other.clone();
        Self::function(move |x| {
            a.survival(x).unwrap_or(f64::NAN) * b.survival(x).unwrap_or(f64::NAN)
        })
    }
}

pub(crate) fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|v| *v <= x) - 1;
    let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + t * (ys[j + 1] - ys[j])
}
