use serde::{Deserialize, Serialize};

use super::{route_rmse, EvalError, RouteReport};
use crate::baselines::{
    autoencoder_baseline, fit_variogram, gp_fit, gp_predict, kriging_predict, AutoencoderConfig,
    AutoencoderSample, GpConfig,
};
use crate::datasets::{Measurement, NormWindow};
use crate::neural::DualTxModel;
use crate::pipeline::{
    aerial_points, predict_map, route_voxels, PairData, StageReport, TrainConfig,
};

/// One evaluated route of one cell: the voxels it visits, the ground truth
/// there (target-domain map, dBm) and the arc length of each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteCase {
    pub pair: usize,
    pub stream: usize,
    pub route: usize,
    pub voxels: Vec<usize>,
    pub truth: Vec<f64>,
    pub arc: Vec<f64>,
}

/// Every (pair, stream, evaluation route) case in a fixed order.
pub fn route_cases(pairs: &[PairData]) -> Result<Vec<RouteCase>, EvalError> {
    let mut out = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        for s in 0..2 {
            for (r, route) in pair.eval_routes.iter().enumerate() {
                let voxels = route_voxels(&pair.grid, route)?;
                let truth = voxels
                    .iter()
                    .map(|&i| pair.target_maps[s].values[i] as f64)
                    .collect();
                let arc = route.sample_points().into_iter().map(|(_, a)| a).collect();
                out.push(RouteCase {
                    pair: p,
                    stream: s,
                    route: r,
                    voxels,
                    truth,
                    arc,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(EvalError::Empty("evaluation routes"));
    }
    Ok(out)
}

/// Scores per-case predictions; `predict(pair, stream, case)` returns the
/// profile in dBm.
fn score(
    method: &str,
    cases: &[RouteCase],
    mut predict: impl FnMut(usize, usize, &RouteCase) -> Result<Vec<f64>, EvalError>,
) -> Result<RouteReport, EvalError> {
    let mut rmse = Vec::with_capacity(cases.len());
    for c in cases {
        rmse.push(route_rmse(&predict(c.pair, c.stream, c)?, &c.truth)?);
    }
    RouteReport::new(method, rmse)
}

/// Proposed model: target encoder on each cell's rasterized ground data,
/// decoder chosen by the dual-cell toggle.
pub fn evaluate_model(
    method: &str,
    model: &DualTxModel,
    pairs: &[PairData],
    cfg: &TrainConfig,
) -> Result<RouteReport, EvalError> {
    let cases = route_cases(pairs)?;
    let mut maps = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut m = Vec::with_capacity(2);
        for s in 0..2 {
            m.push(predict_map(
                model,
                &pair.ground_grid[s],
                cfg.decoder_for(s),
            )?);
        }
        maps.push(m);
    }
    score(method, &cases, |p, s, c| {
        Ok(c.voxels.iter().map(|&i| maps[p][s][i]).collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSuiteConfig {
    pub k_neighbors: usize,
    pub variogram_bins: usize,
    pub gp: GpConfig,
    pub autoencoder: AutoencoderConfig,
}

impl Default for BaselineSuiteConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 32,
            variogram_bins: 15,
            gp: GpConfig::default(),
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

/// Baseline training data of one cell: its ground reports inside the crop
/// plus its aerial samples.
fn training_data(pair: &PairData, s: usize) -> Vec<Measurement> {
    let mut v = pair.ground[s].within(&pair.grid).items;
    v.extend(pair.aerial[s].items.iter().cloned());
    v
}

fn centers(pair: &PairData, c: &RouteCase) -> Vec<[f64; 3]> {
    c.voxels.iter().map(|&i| pair.grid.center_of(i)).collect()
}

/// Ordinary kriging with a per-cell fitted variogram; also returns the
/// total number of inverse-distance fallbacks.
pub fn evaluate_kriging(
    pairs: &[PairData],
    cfg: &BaselineSuiteConfig,
) -> Result<(RouteReport, usize), EvalError> {
    let cases = route_cases(pairs)?;
    let data: Vec<Vec<Measurement>> = cells(pairs)
        .map(|(p, s)| training_data(&pairs[p], s))
        .collect();
    let vgs = data
        .iter()
        .map(|d| fit_variogram(d, cfg.variogram_bins))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fallbacks = 0;
    let report = score("kriging", &cases, |p, s, c| {
        let r = kriging_predict(
            &data[2 * p + s],
            &vgs[2 * p + s],
            &centers(&pairs[p], c),
            cfg.k_neighbors,
        )?;
        fallbacks += r.fallbacks;
        Ok(r.values)
    })?;
    Ok((report, fallbacks))
}

/// GP regression with per-cell hyperparameters chosen by marginal likelihood.
pub fn evaluate_gp(
    pairs: &[PairData],
    cfg: &BaselineSuiteConfig,
) -> Result<RouteReport, EvalError> {
    let cases = route_cases(pairs)?;
    let data: Vec<Vec<Measurement>> = cells(pairs)
        .map(|(p, s)| training_data(&pairs[p], s))
        .collect();
    let hps = data
        .iter()
        .map(|d| gp_fit(d, &cfg.gp))
        .collect::<Result<Vec<_>, _>>()?;
    score("gp", &cases, |p, s, c| {
        Ok(gp_predict(
            &data[2 * p + s],
            &hps[2 * p + s],
            &centers(&pairs[p], c),
            &cfg.gp,
        )?)
    })
}

fn cells(pairs: &[PairData]) -> impl Iterator<Item = (usize, usize)> {
    (0..pairs.len()).flat_map(|p| [(p, 0), (p, 1)])
}

/// Single-stream autoencoder trained on every cell of the benchmark.
pub fn evaluate_autoencoder(
    pairs: &[PairData],
    norm: NormWindow,
    cfg: &BaselineSuiteConfig,
) -> Result<(RouteReport, StageReport), EvalError> {
    let cases = route_cases(pairs)?;
    let samples: Vec<AutoencoderSample> = pairs
        .iter()
        .flat_map(|pair| {
            (0..2).map(move |s| AutoencoderSample {
                ground: pair.ground_grid[s].clone(),
                aerial: aerial_points(&pair.aerial[s], &pair.grid, &norm),
            })
        })
        .collect();
    let (model, train) = autoencoder_baseline(&samples, norm, &cfg.autoencoder)?;
    let maps = samples
        .iter()
        .map(|x| model.predict_map(&x.ground))
        .collect::<Result<Vec<_>, _>>()?;
    let report = score("autoencoder", &cases, |p, s, c| {
        Ok(c.voxels.iter().map(|&i| maps[2 * p + s][i]).collect())
    })?;
    Ok((report, train))
}
