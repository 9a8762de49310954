//! Measures on `R^d x {0, 1}` and functionals of them.

pub mod ensemble;
pub mod functional;
pub mod wasserstein;

pub use ensemble::{Particle, RandomizedStopRule, SplitMode, StoppedEnsemble};
pub use functional::{
    functional_derivative_check, CylindricalFunctional, FunctionalSum, Linearization,
    MeasureFunctional, Outer, ScalarTestFunction, TestFunction,
};
pub use wasserstein::{wasserstein2, TransportPlan};
