//! LQR-anchored neural feedback controllers.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod linalg;
pub mod lqr;
pub mod models;
pub mod ocp;
pub mod ode;
pub mod parallel;
pub mod policies;
pub mod training;

pub use error::{Error, Result};
pub use evaluation::{EvalReport, EvalSpec, SimResult, SimSettings, Termination};
pub use experiment::{ExperimentConfig, RunOptions};
pub use lqr::{LqrPolicy, LqrSolution};
pub use models::config::ModelConfig;
pub use models::{ControlBounds, ControlSystem, EquilibriumPair, SamplingDomain};
pub use ocp::{Dataset, Method, OcpSettings};
pub use policies::{ArchitectureKind, NeuralPolicy, Policy, PolicyCheckpoint};
pub use training::{TrainReport, TrainSpec};
