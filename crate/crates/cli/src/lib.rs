//! Experiment harness for the spectral averaging toolkit: TOML
//! specifications, CSV artifacts with provenance headers, and a rayon
//! replica executor.

pub mod config;
pub mod exec;
pub mod experiment;
pub mod output;

pub use config::{parse_config, ExperimentKind, ExperimentSpec, SpecError};
pub use exec::Parallel;
pub use experiment::{run, Check, Outcome, RunError};
