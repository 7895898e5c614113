//! Experiment harness for the slamkn estimators: config files, sweep grids,
//! the MSE table and its CSV/JSON output.

pub mod config;
pub mod error;
pub mod estimators;
pub mod experiment;

pub use config::{DatasetConfig, DatasetRef, Estimator, ExperimentSpec, Sweep, SweepVariable};
pub use error::{BenchError, Result};
pub use estimators::{run_estimator, score, CellScore, CellStatus, ModelSet, A2_NOISE};
pub use experiment::{run_experiment, write_csv, ExperimentResult, Row};
