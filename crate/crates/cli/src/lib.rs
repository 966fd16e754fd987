//! Experiment harness for the personalization simulator: the full pipeline
//! driver plus the report emitters, also exposed as a library so the
//! acceptance tests can run experiments in-process.

pub mod experiment;
pub mod reports;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult, SpeakerOutcome, StageError};
