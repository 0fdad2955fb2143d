//! Experiment configuration and the end-to-end pipelines behind the CLI.
//!
//! Every stage draws its randomness from `seed::derive(master, &[stage])`, so
//! `simulate`, `fit`, `estimate` and `oracle` run separately reproduce exactly
//! what a single in-memory run would produce. Sweep cells derive their master
//! seed from `(seed, horizon)` only: all variants in a cell see the same data.

mod config;
mod pipeline;
mod sweep;

use thiserror::Error;

pub use config::{ExperimentConfig, OracleConfig, Variant};
pub use pipeline::{
    cmd_estimate, cmd_fit, cmd_oracle, cmd_simulate, estimate, fit, records, sidecar, simulate, Environment,
    FitOutput, GroundTruth,
};
pub use sweep::{aggregate, cmd_ablate, run_sweep, AggregateRow, CellRow, CellStatus};

use crate::data::DataError;
use crate::envs::EnvError;
use crate::inference::InferenceError;
use crate::loss::LossError;
use crate::tree::TreeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
