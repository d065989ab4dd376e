//! Time integration, disturbances, scenario execution and trajectory metrics.

pub mod disturbance;
pub mod integrator;
pub mod metrics;
pub mod runner;

use thiserror::Error;

use crate::control::ControlError;
use crate::network::NetworkError;

pub use disturbance::{disturbance_signal, DisturbanceSignal};
pub use integrator::rk4_step;
pub use metrics::{compute_metrics, GeneratorMetrics, MetricsError, MetricsReport, SystemMetrics};
pub use runner::{
    run_scenario, ControllerKind, ConventionalConfig, EagcConfig, Initialization, RunDiagnostics, Scenario,
    SolverConfig, Trajectory,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid solver or scenario configuration: {0}")]
    Config(String),
    #[error("horizon {horizon} s is shorter than the required {needed} s")]
    HorizonTooShort { horizon: f64, needed: f64 },
    #[error("simulation diverged at t = {t:.6} s: {what} = {value:e}")]
    Diverged { t: f64, what: String, value: f64 },
    #[error("network evaluation failed at t = {t:.6} s: {source}")]
    Network {
        t: f64,
        #[source]
        source: NetworkError,
    },
    #[error(transparent)]
    Setup(#[from] NetworkError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

impl SimError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, SimError::Diverged { .. } | SimError::Network { .. })
    }
}
