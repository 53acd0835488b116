//! Command drivers behind the `vrs` binary: experiment runs, dataset
//! ingestion, and machine-readable CSV outputs. Every command is a pure
//! function of its options (seeded RNG streams included), and every emitted
//! CSV starts with a `schema_version` column.

mod commands;
mod config;

pub use commands::{
    cmd_eval, cmd_grid_kl, cmd_toy_poisson, cmd_train_sbn, DataSource, EvalOpts, EvalOutcome,
    GridKlOpts, ToyPoissonOpts, ToyPoissonOutcome, TrainSbnOpts, TrainSbnOutcome,
};
pub use config::{parse_config_file, parse_threshold_list, resolve, resolve_opt, ConfigMap};

use thiserror::Error;

use crate::data::DataError;
use crate::dist::DistError;
use crate::oracle::OracleError;
use crate::threshold::ThresholdError;
use crate::train::{CheckpointError, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_BUDGET: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("sampler budget exhausted: {0}")]
    Budget(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Io(_) | CliError::Checkpoint(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Budget(_) => EXIT_BUDGET,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Budget { .. } => CliError::Budget(err.to_string()),
            TrainError::NonFiniteGradient { .. } => CliError::Numeric(err.to_string()),
            TrainError::Config(msg) => CliError::Config(msg),
            TrainError::Checkpoint(e) => CliError::Checkpoint(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DistError> for CliError {
    fn from(err: DistError) -> Self {
        CliError::Config(err.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(err: OracleError) -> Self {
        match err {
            OracleError::NonFiniteObjective(v) => CliError::Numeric(format!("objective {v}")),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ThresholdError> for CliError {
    fn from(err: ThresholdError) -> Self {
        CliError::Config(err.to_string())
    }
}
