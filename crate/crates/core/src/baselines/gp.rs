use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dist, points_of, BaselineError};
use crate::datasets::Measurement;
use crate::rng;

/// Squared-exponential kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// m
    pub length_scale: f64,
    /// dB²
    pub signal_variance: f64,
    /// dB²
    pub noise_variance: f64,
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.length_scale) && ok(self.signal_variance) && ok(self.noise_variance)) {
            return Err(BaselineError::Param(format!(
                "GP hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn kernel(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let d = dist(a, b) / self.length_scale;
        self.signal_variance * (-0.5 * d * d).exp()
    }
}

/// Candidate grid searched by maximum marginal likelihood. Signal variances
/// are multiples of the sample variance of the training values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpCandidateGrid {
    pub length_scales: Vec<f64>,
    pub signal_variance_factors: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl Default for GpCandidateGrid {
    fn default() -> Self {
        Self {
            length_scales: vec![50.0, 100.0, 200.0, 400.0],
            signal_variance_factors: vec![0.5, 1.0, 2.0],
            noise_variances: vec![1.0, 4.0, 16.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub candidates: GpCandidateGrid,
    /// Training sets above this size are subsampled.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            candidates: GpCandidateGrid::default(),
            max_points: 2000,
            seed: 0,
        }
    }
}

/// Seeded subsample (order preserved) used for both fitting and prediction.
fn training_set(
    ms: &[Measurement],
    cfg: &GpConfig,
) -> Result<(Vec<[f64; 3]>, Vec<f64>), BaselineError> {
    if ms.is_empty() {
        return Err(BaselineError::TooFew { need: 1, got: 0 });
    }
    if cfg.max_points == 0 {
        return Err(BaselineError::Param("max_points must be >= 1".into()));
    }
    let (points, values) = points_of(ms);
    if points.len() <= cfg.max_points {
        return Ok((points, values));
    }
    let mut idx = sample(
        &mut rng::stream(cfg.seed, "gp.subsample"),
        points.len(),
        cfg.max_points,
    )
    .into_vec();
    idx.sort_unstable();
    Ok((
        idx.iter().map(|&i| points[i]).collect(),
        idx.iter().map(|&i| values[i]).collect(),
    ))
}

/// Jitter levels (relative to the signal variance) tried after a failed
/// factorization.
const JITTER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Posterior of a constant-mean GP (mean = training average).
pub struct GpPosterior {
    pub hp: GpHyperparams,
    pub mean: f64,
    points: Vec<[f64; 3]>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    centered: DVector<f64>,
}

impl GpPosterior {
    pub fn new(
        points: Vec<[f64; 3]>,
        values: &[f64],
        hp: GpHyperparams,
    ) -> Result<Self, BaselineError> {
        hp.validate()?;
        let n = points.len();
        if n == 0 || n != values.len() {
            return Err(BaselineError::TooFew {
                need: 1,
                got: n.min(values.len()),
            });
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let centered = DVector::from_iterator(n, values.iter().map(|v| v - mean));
        let k = DMatrix::from_fn(n, n, |i, j| {
            hp.kernel(&points[i], &points[j]) + if i == j { hp.noise_variance } else { 0.0 }
        });
        let mut chol = Cholesky::new(k.clone());
        for j in JITTER {
            if chol.is_some() {
                break;
            }
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += j * hp.signal_variance;
            }
            chol = Cholesky::new(kj);
        }
        let chol = chol.ok_or(BaselineError::NotPositiveDefinite {
            jitter: JITTER[JITTER.len() - 1],
        })?;
        let alpha = chol.solve(&centered);
        Ok(Self {
            hp,
            mean,
            points,
            alpha,
            chol,
            centered,
        })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.points.len() as f64;
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.centered.dot(&self.alpha)
            - log_det
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn predict(&self, q: &[f64; 3]) -> f64 {
        self.mean
            + self
                .points
                .iter()
                .zip(self.alpha.iter())
                .map(|(p, a)| self.hp.kernel(p, q) * a)
                .sum::<f64>()
    }
}

/// Hyperparameters maximizing the log marginal likelihood over the grid;
/// ties keep the earliest candidate.
pub fn gp_fit(ms: &[Measurement], cfg: &GpConfig) -> Result<GpHyperparams, BaselineError> {
    let (points, values) = training_set(ms, cfg)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
    let c = &cfg.candidates;
    let mut grid = Vec::new();
    for &l in &c.length_scales {
        for &f in &c.signal_variance_factors {
            for &s in &c.noise_variances {
                grid.push(GpHyperparams {
                    length_scale: l,
                    signal_variance: f * var,
                    noise_variance: s,
                });
            }
        }
    }
    if grid.is_empty() {
        return Err(BaselineError::Param("empty GP candidate grid".into()));
    }
    let scored: Vec<Result<(GpHyperparams, f64), BaselineError>> = grid
        .into_par_iter()
        .map(|hp| {
            GpPosterior::new(points.clone(), &values, hp).map(|p| (hp, p.log_marginal_likelihood()))
        })
        .collect();
    let mut best: Option<(GpHyperparams, f64)> = None;
    for s in scored {
        let (hp, ll) = s?;
        if best.is_none_or(|b| ll > b.1) {
            best = Some((hp, ll));
        }
    }
    Ok(best.expect("non-empty grid").0)
}

/// Posterior mean (dBm) at each query.
pub fn gp_predict(
    ms: &[Measurement],
    hp: &GpHyperparams,
    queries: &[[f64; 3]],
    cfg: &GpConfig,
) -> Result<Vec<f64>, BaselineError> {
    let (points, values) = training_set(ms, cfg)?;
    let post = GpPosterior::new(points, &values, *hp)?;
    Ok(queries.par_iter().map(|q| post.predict(q)).collect())
}
