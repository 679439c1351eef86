//! Discrete-event simulation of beacon rounds.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod trace;

pub use config::{ConfigError, ScenarioConfig, DEFAULT_CP_CALIBRATION};
pub use engine::{codebooks_for, run_scenario, RunOptions, RunOutput, SimError};
pub use metrics::{compute_metrics, metrics_csv, Metrics, NodeReport, RoundRecord, Summary};
pub use trace::rounds_from_trace;
