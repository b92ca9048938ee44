//! Classical comparison methods: ordinary kriging, Gaussian-process
//! regression and a plain single-stream autoencoder.

mod autoencoder;
mod gp;
mod kriging;

use thiserror::Error;

use crate::datasets::Measurement;
use crate::neural::NeuralError;
use crate::pipeline::PipelineError;

pub use autoencoder::{autoencoder_baseline, Autoencoder, AutoencoderConfig, AutoencoderSample};
pub use gp::{gp_fit, gp_predict, GpCandidateGrid, GpConfig, GpHyperparams, GpPosterior};
pub use kriging::{
    fit_variogram, kriging_predict, kriging_weights, KrigingResult, VariogramFamily, VariogramModel,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("need at least {need} measurements, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate lags: all measurement positions coincide")]
    DegenerateLag,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("kernel matrix not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Positions and values of a sample list.
pub(crate) fn points_of(ms: &[Measurement]) -> (Vec<[f64; 3]>, Vec<f64>) {
    ms.iter().map(|m| (m.position, m.rsrp)).unzip()
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
