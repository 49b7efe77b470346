//! Config-driven experiments for `fairpoison-core`: seeded replications over
//! attacks and budgets, grid sweeps, the batch-size defense sweep and the
//! bound simulation, with JSON and tidy CSV outputs.

pub mod config;
pub mod experiment;
pub mod output;
pub mod sweep;

pub use config::{DataSource, ExperimentConfig, Grid, GridPoint, TheorySection, TrainOverrides, VictimSection};
pub use experiment::{run_experiment, ControlRecord, RunArtifact, RunRecord, Runner};
pub use fairpoison_core as core;
pub use output::write_artifact;
pub use sweep::{defense_sweep, sweep, DefenseTable, SimFile, SweepResult};
