use std::sync::Arc;

use crate::measure::ensemble::StoppedEnsemble;
use crate::quadrature::gauss_legendre_unit;

/// Inner test function `psi(x, i)` with the spatial derivatives of the
/// surviving branch needed by the generator.
pub trait TestFunction: Send + Sync {
    fn value(&self, x: &[f64], alive: bool) -> f64;

    /// `sum_j b_j d_j psi(x, 1) + 1/2 sum_j s_j^2 d_jj psi(x, 1)` for a
    /// diagonal diffusion with volatilities `s`.
    fn generator(&self, x: &[f64], drift: &[f64], vol: &[f64]) -> f64;
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Test function of the first coordinate, given by `(psi1, psi1', psi1'')`
/// on surviving mass and `psi0` on stopped mass.
#[derive(Clone)]
pub struct ScalarTestFunction {
    alive: [ScalarFn; 3],
    dead: ScalarFn,
}

impl ScalarTestFunction {
    pub fn new<F, G, H, D>(f: F, df: G, d2f: H, dead: D) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
        H: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            alive: [Arc::new(f), Arc::new(df), Arc::new(d2f)],
            dead: Arc::new(dead),
        }
    }

    /// `e^{-x^2/2} i`.
    pub fn gaussian_alive() -> Self {
        Self::new(
            gaussian,
            |x| -x * gaussian(x),
            |x| (x * x - 1.0) * gaussian(x),
            |_| 0.0,
        )
    }

    /// `x` regardless of the survival flag.
    pub fn identity() -> Self {
        Self::new(|x| x, |_| 1.0, |_| 0.0, |x| x)
    }

    /// The survival indicator `i`.
    pub fn survival() -> Self {
        Self::new(|_| 1.0, |_| 0.0, |_| 0.0, |_| 0.0)
    }

    /// `cos(x) i + 1/2 (1 - i)`.
    pub fn cosine_alive() -> Self {
        Self::new(f64::cos, |x| -x.sin(), |x| -x.cos(), |_| 0.5)
    }

    pub fn alive_value(&self, x: f64) -> f64 {
        (self.alive[0])(x)
    }

    pub fn alive_derivative(&self, x: f64) -> f64 {
        (self.alive[1])(x)
    }

    pub fn alive_second_derivative(&self, x: f64) -> f64 {
        (self.alive[2])(x)
    }

    pub fn dead_value(&self, x: f64) -> f64 {
        (self.dead)(x)
    }
}

impl TestFunction for ScalarTestFunction {
    #[inline]
    fn value(&self, x: &[f64], alive: bool) -> f64 {
        if alive {
            (self.alive[0])(x[0])
        } else {
            (self.dead)(x[0])
        }
    }

    #[inline]
    fn generator(&self, x: &[f64], drift: &[f64], vol: &[f64]) -> f64 {
        drift[0] * (self.alive[1])(x[0]) + 0.5 * vol[0] * vol[0] * (self.alive[2])(x[0])
    }
}

#[inline]
pub fn gaussian(x: f64) -> f64 {
    (-0.5 * x * x).exp()
}

type OuterFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Outer function `eta(t, v)` with its partials `eta_t` and `eta_v`.
#[derive(Clone)]
pub struct Outer {
    eta: OuterFn,
    eta_t: OuterFn,
    eta_v: OuterFn,
}

impl Outer {
    pub fn new<F, G, H>(eta: F, eta_t: G, eta_v: H) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        H: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            eta: Arc::new(eta),
            eta_t: Arc::new(eta_t),
            eta_v: Arc::new(eta_v),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c, |_, _| 0.0, |_, _| 0.0)
    }

    /// `eta(t, v) = k v`.
    pub fn linear(k: f64) -> Self {
        Self::new(move |_, v| k * v, |_, _| 0.0, move |_, _| k)
    }

    pub fn square() -> Self {
        Self::new(|_, v| v * v, |_, _| 0.0, |_, v| 2.0 * v)
    }

    pub fn exp() -> Self {
        Self::new(|_, v: f64| v.exp(), |_, _| 0.0, |_, v: f64| v.exp())
    }

    /// `eta(t, v) = (horizon - t) e^v`.
    pub fn decaying_exp(horizon: f64) -> Self {
        Self::new(
            move |t, v: f64| (horizon - t) * v.exp(),
            |_, v: f64| -v.exp(),
            move |t, v: f64| (horizon - t) * v.exp(),
        )
    }

    #[inline]
    pub fn eta(&self, t: f64, v: f64) -> f64 {
        (self.eta)(t, v)
    }

    #[inline]
    pub fn eta_t(&self, t: f64, v: f64) -> f64 {
        (self.eta_t)(t, v)
    }

    #[inline]
    pub fn eta_v(&self, t: f64, v: f64) -> f64 {
        (self.eta_v)(t, v)
    }
}

/// First-order data of a functional at a fixed `(t, m)`.
pub trait Linearization {
    fn value(&self) -> f64;

    /// `d_t u(t, m)` with the measure held fixed.
    fn time_derivative(&self) -> f64;

    /// Linear functional derivative `delta_m u(t, m, x, i)`.
    fn flat(&self, x: &[f64], alive: bool) -> f64;

    /// Generator of `X` applied to `delta_m u(t, m, ., 1)` at `x`.
    fn generator(&self, x: &[f64], drift: &[f64], vol: &[f64]) -> f64;

    /// `D_I u = delta_m u(., 1) - delta_m u(., 0)`.
    fn d_i(&self, x: &[f64]) -> f64 {
        self.flat(x, true) - self.flat(x, false)
    }
}

/// A functional `u(t, m)` on time and measures with a linear functional
/// derivative.
pub trait MeasureFunctional: Send + Sync {
    fn evaluate(&self, t: f64, m: &StoppedEnsemble) -> f64;

    fn linearize<'a>(&'a self, t: f64, m: &StoppedEnsemble) -> Box<dyn Linearization + 'a>;
}

/// `u(t, m) = eta(t, m[psi])`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    pub psi: Arc<dyn TestFunction>,
    pub outer: Outer,
}

impl CylindricalFunctional {
    pub fn new<P: TestFunction + 'static>(psi: P, outer: Outer) -> Self {
        Self {
            psi: Arc::new(psi),
            outer,
        }
    }

    /// `m[psi]`, without finiteness checks.
    pub fn statistic(&self, m: &StoppedEnsemble) -> f64 {
        m.expectation_unchecked(|x, i| self.psi.value(x, i))
    }
}

struct CylindricalLinearization<'a> {
    u: &'a CylindricalFunctional,
    value: f64,
    dt: f64,
    scale: f64,
}

impl Linearization for CylindricalLinearization<'_> {
    fn value(&self) -> f64 {
        self.value
    }

    fn time_derivative(&self) -> f64 {
        self.dt
    }

    #[inline]
    fn flat(&self, x: &[f64], alive: bool) -> f64 {
        self.scale * self.u.psi.value(x, alive)
    }

    #[inline]
    fn generator(&self, x: &[f64], drift: &[f64], vol: &[f64]) -> f64 {
        self.scale * self.u.psi.generator(x, drift, vol)
    }

    #[inline]
    fn d_i(&self, x: &[f64]) -> f64 {
        self.scale * (self.u.psi.value(x, true) - self.u.psi.value(x, false))
    }
}

impl MeasureFunctional for CylindricalFunctional {
    fn evaluate(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.outer.eta(t, self.statistic(m))
    }

    fn linearize<'a>(&'a self, t: f64, m: &StoppedEnsemble) -> Box<dyn Linearization + 'a> {
        let v = self.statistic(m);
        Box::new(CylindricalLinearization {
            u: self,
            value: self.outer.eta(t, v),
            dt: self.outer.eta_t(t, v),
            scale: self.outer.eta_v(t, v),
        })
    }
}

/// Pointwise sum of functionals.
#[derive(Clone)]
pub struct FunctionalSum(pub Vec<Arc<dyn MeasureFunctional>>);

struct SumLinearization<'a>(Vec<Box<dyn Linearization + 'a>>);

impl Linearization for SumLinearization<'_> {
    fn value(&self) -> f64 {
        self.0.iter().map(|l| l.value()).sum()
    }

    fn time_derivative(&self) -> f64 {
        self.0.iter().map(|l| l.time_derivative()).sum()
    }

    fn flat(&self, x: &[f64], alive: bool) -> f64 {
        self.0.iter().map(|l| l.flat(x, alive)).sum()
    }

    fn generator(&self, x: &[f64], drift: &[f64], vol: &[f64]) -> f64 {
        self.0.iter().map(|l| l.generator(x, drift, vol)).sum()
    }
}

impl MeasureFunctional for FunctionalSum {
    fn evaluate(&self, t: f64, m: &StoppedEnsemble) -> f64 {
        self.0.iter().map(|u| u.evaluate(t, m)).sum()
    }

    fn linearize<'a>(&'a self, t: f64, m: &StoppedEnsemble) -> Box<dyn Linearization + 'a> {
        Box::new(SumLinearization(
            self.0.iter().map(|u| u.linearize(t, m)).collect(),
        ))
    }
}

/// `|u(m') - u(m) - int_0^1 int delta_m u(l m' + (1 - l) m, y) (m' - m)(dy) dl|`
/// with an `n_lambda`-point Gauss-Legendre rule in `l` and exact particle
/// sums in `y`.
pub fn functional_derivative_check(
    u: &dyn MeasureFunctional,
    t: f64,
    m: &StoppedEnsemble,
    m_prime: &StoppedEnsemble,
    n_lambda: usize,
) -> f64 {
    let (nodes, weights) = gauss_legendre_unit(n_lambda.max(1));
    let mut integral = 0.0;
    for (l, wl) in nodes.iter().zip(&weights) {
        let mix = m
            .mix_with(m_prime, *l)
            .expect("ensembles of equal dimension");
        let lin = u.linearize(t, &mix);
        let plus: f64 = m_prime
            .particles()
            .map(|(x, i, w)| w * lin.flat(x, i))
            .sum();
        let minus: f64 = m.particles().map(|(x, i, w)| w * lin.flat(x, i)).sum();
        integral += wl * (plus - minus);
    }
    (u.evaluate(t, m_prime) - u.evaluate(t, m) - integral).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ensemble::Particle;

    fn sample_pair() -> (StoppedEnsemble, StoppedEnsemble) {
        let m = StoppedEnsemble::new(
            1,
            vec![
                Particle::scalar(-0.3, true, 0.2),
                Particle::scalar(0.8, true, 0.5),
                Particle::scalar(1.4, false, 0.3),
            ],
        )
        .unwrap();
        let mp = StoppedEnsemble::new(
            1,
            vec![
                Particle::scalar(0.1, true, 0.6),
                Particle::scalar(-2.0, false, 0.4),
            ],
        )
        .unwrap();
        (m, mp)
    }

    #[test]
    fn linear_functional_is_exact() {
        let (m, mp) = sample_pair();
        let u =
            CylindricalFunctional::new(ScalarTestFunction::gaussian_alive(), Outer::linear(1.0));
        assert!(functional_derivative_check(&u, 0.0, &m, &mp, 8) <= 1e-12);
    }

    #[test]
    fn quadratic_functional_is_exact() {
        let (m, mp) = sample_pair();
        let u = CylindricalFunctional::new(ScalarTestFunction::cosine_alive(), Outer::square());
        assert!(functional_derivative_check(&u, 0.0, &m, &mp, 16) <= 1e-10);
    }

    #[test]
    fn exponential_residual_shrinks_with_nodes() {
        let (m, mp) = sample_pair();
        let psi = ScalarTestFunction::new(|x| 3.0 * x, |_| 3.0, |_| 0.0, |x| -2.0 * x);
        let u = CylindricalFunctional::new(psi, Outer::exp());
        let r: Vec<f64> = [1, 2, 4]
            .iter()
            .map(|&n| functional_derivative_check(&u, 0.0, &m, &mp, n))
            .collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    #[test]
    fn d_i_matches_outer_times_jump_of_psi() {
        let (m, _) = sample_pair();
        let psi = ScalarTestFunction::cosine_alive();
        let u = CylindricalFunctional::new(psi.clone(), Outer::square());
        let v = u.statistic(&m);
        let lin = u.linearize(0.3, &m);
        for x in [-1.0, 0.0, 0.7] {
            let expected = u.outer.eta_v(0.3, v) * (psi.alive_value(x) - psi.dead_value(x));
            assert_eq!(lin.d_i(&[x]), expected);
        }
    }
}
