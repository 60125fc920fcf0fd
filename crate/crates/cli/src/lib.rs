//! Batch pipeline around the `bymap` library: adjacency and merging,
//! standardization, covariate screening, model fitting, reporting and
//! synthetic fixtures. Every command reads one [`config::RunConfig`] and
//! writes plain files into the configured output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;
pub mod simulate;

use std::path::PathBuf;

use bymap::bym::ModelError;
use bymap::cohort::CohortError;
use bymap::covariates::CovariateError;
use bymap::geounits::GeoError;
use bymap::inference::InferenceError;
use bymap::mapping::MapError;
use bymap::selection::SelectionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("required file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("sampler diagnostics exceed the convergence threshold; outputs were written")]
    NotConverged,
}

/// Process exit status.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 1;
    pub const NUMERICAL: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
}

fn model_exit(e: &ModelError) -> i32 {
    match e {
        ModelError::Divergence { .. } | ModelError::Sparse(_) => exit::NUMERICAL,
        _ => exit::INPUT,
    }
}

fn inference_exit(e: &InferenceError) -> i32 {
    match e {
        InferenceError::Model(m) => model_exit(m),
        InferenceError::Config(_) => exit::INPUT,
        _ => exit::NUMERICAL,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) => model_exit(e),
            CliError::Inference(e) => inference_exit(e),
            CliError::Selection(SelectionError::Inference(e)) => inference_exit(e),
            CliError::Selection(SelectionError::Model(e)) => model_exit(e),
            CliError::Selection(SelectionError::AllFailed(_)) => exit::NUMERICAL,
            CliError::Selection(_) => exit::INPUT,
            CliError::NotConverged => exit::CONVERGENCE,
            _ => exit::INPUT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
