//! Run-directory driver chaining scene generation, simulation, dataset
//! synthesis, the three training stages, baselines, evaluation, ablation and
//! figure emission.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use skymap_core::baselines::BaselineError;
use skymap_core::datasets::DataError;
use skymap_core::eval::EvalError;
use skymap_core::geoscene::SceneError;
use skymap_core::neural::NeuralError;
use skymap_core::pipeline::PipelineError;
use skymap_core::propsim::PropError;
use thiserror::Error;

pub use commands::{execute, load_pairs, Command};
pub use config::{EvalConfig, RunConfig};
pub use manifest::{RunManifest, StageRecord, StageStatus};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {artifact}: run `skymap {producer}` first")]
    Missing {
        artifact: String,
        producer: &'static str,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("run directory {0} is locked by another command (remove manifest.lock if stale)")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Format(_) | CliError::Locked(_) | CliError::Io(_) => 5,
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Parse { .. }
            | SceneError::Building { .. }
            | SceneError::Transmitter { .. } => CliError::Format(e.to_string()),
            SceneError::Io(e) => CliError::Io(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PropError> for CliError {
    fn from(e: PropError) -> Self {
        match e {
            PropError::Params(m) => CliError::Config(m),
            PropError::Format(m) => CliError::Format(m),
            PropError::Io(e) => CliError::Io(e),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Parse { .. } | DataError::Shape(_) | DataError::OutOfBounds { .. } => {
                CliError::Format(e.to_string())
            }
            DataError::Io(e) => CliError::Io(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::NonFinite(_) => CliError::Numerical(e.to_string()),
            NeuralError::Io(e) => CliError::Io(e),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Diverged { .. } => CliError::Numerical(e.to_string()),
            PipelineError::Neural(e) => e.into(),
            PipelineError::Data(e) => e.into(),
            PipelineError::Prop(e) => e.into(),
            PipelineError::Scene(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::NotPositiveDefinite { .. } => CliError::Numerical(e.to_string()),
            BaselineError::Pipeline(e) => e.into(),
            BaselineError::Neural(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Io(e),
            EvalError::Pipeline(e) => e.into(),
            EvalError::Baseline(e) => e.into(),
            EvalError::Neural(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
