//! Route RMSE protocol, best/mean/worst aggregation, method comparison,
//! the stage-toggle ablation harness and plot-data emission.

mod ablation;
mod figures;
mod methods;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::neural::NeuralError;
use crate::pipeline::PipelineError;

pub use ablation::{ablation_rows, ablation_suite, AblationRow, AblationTable};
pub use figures::{emit_profile, emit_slice, profile_csv, slice_csv};
pub use methods::{
    evaluate_autoencoder, evaluate_gp, evaluate_kriging, evaluate_model, route_cases,
    BaselineSuiteConfig, RouteCase,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("profile length mismatch: {pred} predictions vs {truth} truth values")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("baseline mean must be > 0, got {0}")]
    NonPositiveBaseline(f64),
    #[error("altitude level {level} outside [0, {depth})")]
    Level { level: usize, depth: usize },
    #[error("invalid ablation rows: {0}")]
    Rows(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Root mean square of the dB differences.
pub fn route_rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("route profile"));
    }
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// `(best, mean, worst)` = (min, arithmetic mean, max).
pub fn aggregate(per_route: &[f64]) -> Result<(f64, f64, f64), EvalError> {
    if per_route.is_empty() {
        return Err(EvalError::Empty("per-route RMSE list"));
    }
    let best = per_route.iter().copied().fold(f64::INFINITY, f64::min);
    let worst = per_route.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = per_route.to_vec();
    // order-independent sum so the mean is idempotent under reordering
    sorted.sort_by(f64::total_cmp);
    let mean = (sorted.iter().sum::<f64>() / sorted.len() as f64).clamp(best, worst);
    Ok((best, mean, worst))
}

/// Relative RMSE reduction (percent) of `ours` against a baseline.
pub fn improvement_pct(ours_mean: f64, baseline_mean: f64) -> Result<f64, EvalError> {
    if !(baseline_mean > 0.0) {
        return Err(EvalError::NonPositiveBaseline(baseline_mean));
    }
    Ok(100.0 * (baseline_mean - ours_mean) / baseline_mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub method: String,
    /// dB, one entry per evaluated (cell, route).
    pub per_route: Vec<f64>,
    pub best: f64,
    pub mean: f64,
    pub worst: f64,
    pub count: usize,
}

impl RouteReport {
    pub fn new(method: &str, per_route: Vec<f64>) -> Result<Self, EvalError> {
        let (best, mean, worst) = aggregate(&per_route)?;
        Ok(Self {
            method: method.to_string(),
            count: per_route.len(),
            per_route,
            best,
            mean,
            worst,
        })
    }

    pub fn to_text(&self) -> String {
        let list: Vec<String> = self.per_route.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "method {}\nroutes {}\nper_route {}\nbest {:.6}\nmean {:.6}\nworst {:.6}\n",
            self.method,
            self.count,
            list.join(" "),
            self.best,
            self.mean,
            self.worst
        )
    }
}

/// Method-comparison table: the proposed model against each baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub config_digest: String,
    pub ours: RouteReport,
    pub baselines: Vec<RouteReport>,
    /// Mean-RMSE improvement of the proposed model over each baseline, percent.
    pub improvement_pct: Vec<(String, f64)>,
}

impl Comparison {
    pub fn new(
        seed: u64,
        config_digest: &str,
        ours: RouteReport,
        baselines: Vec<RouteReport>,
    ) -> Result<Self, EvalError> {
        let improvement_pct = baselines
            .iter()
            .map(|b| improvement_pct(ours.mean, b.mean).map(|v| (b.method.clone(), v)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            seed,
            config_digest: config_digest.to_string(),
            ours,
            baselines,
            improvement_pct,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed {}\nconfig_digest {}\n\n",
            self.seed, self.config_digest
        );
        s.push_str(&format!(
            "{:<14} {:>9} {:>9} {:>9}\n",
            "method", "best", "mean", "worst"
        ));
        for r in std::iter::once(&self.ours).chain(&self.baselines) {
            s.push_str(&format!(
                "{:<14} {:>9.3} {:>9.3} {:>9.3}\n",
                r.method, r.best, r.mean, r.worst
            ));
        }
        s.push('\n');
        for (m, v) in &self.improvement_pct {
            s.push_str(&format!("improvement_vs_{m} {v:.2}%\n"));
        }
        s.push('\n');
        for r in std::iter::once(&self.ours).chain(&self.baselines) {
            s.push_str(&r.to_text());
            s.push('\n');
        }
        s
    }
}
