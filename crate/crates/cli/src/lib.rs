//! Experiment front end for the deep residual bidirectional LSTM engine:
//! plain-text configuration files, reproducible run directories, and the
//! `train` / `gridsearch` / `evaluate` / `ablation` commands.
//!
//! The library layer holds everything the binary does apart from argument
//! parsing and printing, so integration tests can drive whole experiments
//! in-process and inspect the results structurally.

use std::path::PathBuf;

use thiserror::Error;

use resbidir::data::DataError;
use resbidir::layers::LayerError;
use resbidir::metrics::MetricsError;
use resbidir::train::{CheckpointError, TrainError};

pub mod artifacts;
pub mod commands;
pub mod config;

pub use artifacts::{RunDir, RunSummary, ARTIFACT_VERSION, INCOMPLETE_MARKER};
pub use commands::{
    cmd_ablation, cmd_evaluate, cmd_gridsearch, cmd_train, load_dataset, TrainOutcome,
    VariantOutcome, ABLATION_VARIANTS,
};
pub use config::{parse_grid, DatasetKind, ExperimentConfig, CONFIG_KEYS};

/// Top-level command failure. Messages lead with the module that failed so
/// an error on the terminal names its origin.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{module} error: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: TrainError,
    },
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("layers error: {0}")]
    Layers(#[from] LayerError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        // Name the module the failure actually came from, not the wrapper.
        let module = match &e {
            TrainError::Tensor(_) => "numerics",
            TrainError::Layer(_) => "layers",
            TrainError::Metrics(_) => "metrics",
            TrainError::Data(_) => "data",
            TrainError::Checkpoint(_) => "checkpoint",
            _ => "training",
        };
        CliError::Module { module, source: e }
    }
}
