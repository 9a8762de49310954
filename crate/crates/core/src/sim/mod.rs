//! Euler-Maruyama simulation of the stopped McKean-Vlasov particle system.

pub mod engine;
pub mod flow;
pub mod model;
pub mod objective;
pub mod policy;

pub use engine::{
    initial_particles, simulate, simulate_observed, SimConfig, Simulation, DEFAULT_GROUPS,
};
pub use flow::{FlowObserver, MeasureFlow, RewardTrace, Snapshot, SnapshotMode, StepView};
pub use model::{MeasureStats, ModelSpec, ParticleGroups, RunningReward, TerminalReward};
pub use objective::{grid_1d, objective, value_search, ObjectiveEstimate, SearchResult};
pub use policy::StoppingPolicy;
