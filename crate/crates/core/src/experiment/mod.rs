//! Experiment driver: configuration, repeated runs, reports and artifacts.

mod config;
mod driver;
mod report;

use thiserror::Error;

use crate::dsl::ParseError;
use crate::graph::GraphError;
use crate::mlkit::MlError;
use crate::runtime::RuntimeError;
use crate::schemes::SchemeError;

pub use config::{DataSection, EnergySection, ExperimentConfig, ExperimentSection, Mode, Overrides, TrainSection, TreeSection};
pub use driver::{
    default_plan, load_mnist, load_program, run_experiment, run_once, write_artifacts, ExperimentOutcome, Mnist,
    RunArtifacts, MNIST_DIR_ENV,
};
pub use report::{energy_per_flop, report_merge, DetectionCounts, MergedReport, RunReport, RunTiming, Stat};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset not found in {dir}: {message}")]
    MissingDataset { dir: String, message: String },
    #[error("program: {0}")]
    Parse(#[from] ParseError),
    #[error("program is invalid:\n{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error("merge: {0}")]
    Merge(String),
}
