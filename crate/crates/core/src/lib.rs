//! Mean field optimal stopping of McKean-Vlasov diffusions.
//!
//! Laws on `S = R^d x {0, 1}` are represented by weighted particle
//! ensembles. On top of that the crate provides a stopped particle
//! simulator, an Ito-formula checker for measure flows, the dynamic
//! programming machinery of the obstacle equation on Wasserstein space, a
//! one-dimensional variational-inequality solver with its measure lift, the
//! convex-dual reduction of mean-variance type criteria, and a fully
//! explicit smooth example.

pub mod dp;
pub mod dual;
pub mod error;
pub mod ito;
pub mod measure;
pub mod obstacle;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod smooth;

pub use error::{Error, Result};
pub use sim::{
    objective, simulate, MeasureFlow, MeasureStats, ModelSpec, SimConfig, StoppingPolicy,
};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use measure::{
    functional_derivative_check, wasserstein2, CylindricalFunctional, Linearization,
    MeasureFunctional, Outer, Particle, RandomizedStopRule, ScalarTestFunction, SplitMode,
    StoppedEnsemble, TestFunction,
};
