//! Experiment orchestration: configuration, checkpoint persistence, training
//! drivers, and report emission.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArrayData, Checkpoint};
pub use config::{Experiment, ExperimentConfig};
pub use experiment::{resume_experiment, run_experiment};
pub use report::emit_report;
