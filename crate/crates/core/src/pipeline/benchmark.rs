//! Synthetic sim-to-shifted-sim benchmark: one scene, adjacent transmitter
//! pairs, source maps under the nominal propagation parameters and
//! "measured" data under shifted ones.

use serde::{Deserialize, Serialize};

use super::{PairData, PipelineError};
use crate::datasets::{
    generate_routes, measurements_to_csv, parse_measurements, rasterize, sample_route_measurements,
    synthesize_ground, Bounds, GridSample, GroundParams, MaskParams, MeasurementSet, NormWindow,
    Route,
};
use crate::geoscene::{build_adjacency, generate_scene, Scene, SceneConfig};
use crate::grid::GridSpec;
use crate::propsim::{compute_radio_map, PropagationParams, RadioMap};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scene: SceneConfig,
    pub source: PropagationParams,
    pub cell_size: f64,
    /// Crop dimensions `[nx, ny, nz]` around each pair.
    pub crop: [usize; 3],
    pub n_pairs: usize,
    /// Largest horizontal transmitter separation considered adjacent.
    pub pair_max_dist: f64,
    pub ground: GroundParams,
    /// Distance bands weighting where ground reports come from.
    pub ground_bands: MaskParams,
    pub holdout_draws: usize,
    pub train_routes: usize,
    pub eval_routes: usize,
    pub altitude_band: (f64, f64),
    pub route_spacing: f64,
    pub keep_prob: f64,
    /// Cap on |D_a| / |D_g| per cell.
    pub max_aerial_ratio: f64,
    pub scene_attempts: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            source: PropagationParams::default(),
            cell_size: 10.0,
            crop: [48, 48, 16],
            n_pairs: 4,
            pair_max_dist: 350.0,
            ground: GroundParams::default(),
            ground_bands: MaskParams::default(),
            holdout_draws: 2,
            train_routes: 4,
            eval_routes: 3,
            altitude_band: (60.0, 140.0),
            route_spacing: 10.0,
            keep_prob: 0.1,
            max_aerial_ratio: 1e-3,
            scene_attempts: 50,
        }
    }
}

pub struct Benchmark {
    pub scene: Scene,
    pub target_params: PropagationParams,
    pub pairs: Vec<PairData>,
}

fn crop_origin(mid: f64, extent: f64, n: usize, cell: f64) -> f64 {
    let span = n as f64 * cell;
    let lo = (mid - 0.5 * span).clamp(0.0, (extent - span).max(0.0));
    (lo / cell).floor() * cell
}

fn rasterize_within(
    ms: &MeasurementSet,
    grid: &GridSpec,
    norm: &NormWindow,
) -> Result<GridSample, PipelineError> {
    Ok(rasterize(&ms.within(grid), grid, norm)?)
}

fn two<T>(v: Vec<T>) -> [T; 2] {
    v.try_into()
        .unwrap_or_else(|_| unreachable!("one entry per stream"))
}

/// Rounds a measurement set to the precision of the measurement file so
/// in-memory and file-based runs see identical data.
fn quantize(ms: MeasurementSet) -> Result<MeasurementSet, PipelineError> {
    if ms.is_empty() {
        return Ok(ms);
    }
    Ok(parse_measurements(&measurements_to_csv(&ms))?)
}

impl BenchmarkConfig {
    /// Disjoint adjacent transmitter pairs of `scene`, as transmitter indices.
    pub fn pairs_of(&self, scene: &Scene) -> Vec<(usize, usize)> {
        build_adjacency(scene, self.pair_max_dist).disjoint_pairs(scene, self.n_pairs)
    }

    /// Shifted propagation parameters standing in for the measured domain.
    pub fn target_params(&self, seed: u64) -> PropagationParams {
        let mut p = self.source.shifted_target();
        p.seed = rng::derive_seed(seed, "bench.shadowing");
        p
    }

    /// Crop grid centred between the two transmitters of a pair.
    pub fn pair_grid(&self, scene: &Scene, (a, b): (usize, usize)) -> GridSpec {
        let (ta, tb) = (&scene.transmitters[a], &scene.transmitters[b]);
        let mid = [
            0.5 * (ta.position[0] + tb.position[0]),
            0.5 * (ta.position[1] + tb.position[1]),
        ];
        GridSpec::new(
            [
                crop_origin(mid[0], scene.extent_x, self.crop[0], self.cell_size),
                crop_origin(mid[1], scene.extent_y, self.crop[1], self.cell_size),
                0.0,
            ],
            self.crop,
            self.cell_size,
        )
    }

    /// Single-level grid over the whole scene from which ground reports are drawn.
    pub fn ground_layer(&self, scene: &Scene) -> GridSpec {
        GridSpec::new(
            [0.0, 0.0, 0.0],
            [
                (scene.extent_x / self.cell_size).ceil() as usize,
                (scene.extent_y / self.cell_size).ceil() as usize,
                1,
            ],
            self.cell_size,
        )
    }
}

/// First scene (over seeded attempts) with enough disjoint adjacent pairs.
pub fn select_scene(
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<(Scene, Vec<(usize, usize)>), PipelineError> {
    let span = [
        cfg.crop[0] as f64 * cfg.cell_size,
        cfg.crop[1] as f64 * cfg.cell_size,
    ];
    if span[0] > cfg.scene.extent_x || span[1] > cfg.scene.extent_y {
        return Err(PipelineError::Config("crop larger than the scene".into()));
    }
    for attempt in 0..cfg.scene_attempts.max(1) {
        let scene = generate_scene(
            rng::derive_seed_idx(seed, "bench.scene", &[attempt as u64]),
            &cfg.scene,
        )?;
        let pairs = cfg.pairs_of(&scene);
        if pairs.len() == cfg.n_pairs {
            return Ok((scene, pairs));
        }
    }
    Err(PipelineError::Config(format!(
        "no scene with {} disjoint transmitter pairs within {} m after {} attempts",
        cfg.n_pairs, cfg.pair_max_dist, cfg.scene_attempts
    )))
}

/// Simulated maps of one pair: source and target maps on the crop, and the
/// target-domain ground layer over the whole scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMaps {
    pub source: [RadioMap; 2],
    pub target: [RadioMap; 2],
    pub layer: [RadioMap; 2],
}

pub fn simulate_pair(
    scene: &Scene,
    cfg: &BenchmarkConfig,
    target_params: &PropagationParams,
    pair: (usize, usize),
) -> Result<PairMaps, PipelineError> {
    let grid = cfg.pair_grid(scene, pair);
    let layer_grid = cfg.ground_layer(scene);
    let (mut source, mut target, mut layer) = (Vec::new(), Vec::new(), Vec::new());
    for t in [pair.0, pair.1] {
        let tx = &scene.transmitters[t];
        source.push(compute_radio_map(scene, tx, &cfg.source, &grid)?);
        target.push(compute_radio_map(scene, tx, target_params, &grid)?);
        layer.push(compute_radio_map(scene, tx, target_params, &layer_grid)?);
    }
    Ok(PairMaps {
        source: two(source),
        target: two(target),
        layer: two(layer),
    })
}

/// Measurement records of one pair: ground reports, independent held-out
/// ground draws, sparse aerial samples, and the evaluation routes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecords {
    pub ground: [MeasurementSet; 2],
    pub holdout: [Vec<MeasurementSet>; 2],
    pub aerial: [MeasurementSet; 2],
    pub eval_routes: Vec<Route>,
}

pub fn pair_records(
    scene: &Scene,
    cfg: &BenchmarkConfig,
    seed: u64,
    index: usize,
    pair: (usize, usize),
    maps: &PairMaps,
) -> Result<PairRecords, PipelineError> {
    let p = index as u64;
    let bounds = Bounds::of_grid(&cfg.pair_grid(scene, pair));
    let routes = |tag: &str, n: usize| {
        generate_routes(
            &bounds,
            n,
            cfg.altitude_band,
            cfg.route_spacing,
            rng::derive_seed_idx(seed, tag, &[p]),
        )
    };
    let train_routes = routes("bench.train_routes", cfg.train_routes)?;
    let eval_routes = routes("bench.eval_routes", cfg.eval_routes)?;
    let (mut ground, mut holdout, mut aerial) = (Vec::new(), Vec::new(), Vec::new());
    for (s, t) in [pair.0, pair.1].into_iter().enumerate() {
        let tx = scene.transmitters[t].position;
        let draw = |tag: &str, idx: &[u64]| {
            synthesize_ground(
                &maps.layer[s],
                scene,
                tx,
                &cfg.ground_bands,
                &cfg.ground,
                rng::derive_seed_idx(seed, tag, idx),
            )
        };
        let dg = quantize(draw("bench.ground", &[p, s as u64])?)?;
        let held = (0..cfg.holdout_draws as u64)
            .map(|k| quantize(draw("bench.ground_holdout", &[p, s as u64, k])?))
            .collect::<Result<Vec<_>, _>>()?;
        aerial.push(quantize(sample_route_measurements(
            &maps.target[s],
            &train_routes,
            cfg.keep_prob,
            rng::derive_seed_idx(seed, "bench.aerial", &[p, s as u64]),
            Some(cfg.max_aerial_ratio),
            dg.len(),
        )?)?);
        holdout.push(held);
        ground.push(dg);
    }
    Ok(PairRecords {
        ground: two(ground),
        holdout: two(holdout),
        aerial: two(aerial),
        eval_routes,
    })
}

/// Training and evaluation material of one pair from its maps and records.
pub fn assemble_pair(
    scene: &Scene,
    cfg: &BenchmarkConfig,
    pair: (usize, usize),
    maps: PairMaps,
    records: PairRecords,
    norm: &NormWindow,
) -> Result<PairData, PipelineError> {
    let grid = cfg.pair_grid(scene, pair);
    let (ta, tb) = (&scene.transmitters[pair.0], &scene.transmitters[pair.1]);
    let raster = |s: usize| rasterize_within(&records.ground[s], &grid, norm);
    let held = |s: usize| {
        records.holdout[s]
            .iter()
            .map(|h| rasterize_within(h, &grid, norm))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(PairData {
        cells: [ta.cell_id.clone(), tb.cell_id.clone()],
        tx_positions: [ta.position, tb.position],
        ground_grid: [raster(0)?, raster(1)?],
        holdout_ground: [held(0)?, held(1)?],
        grid,
        source_maps: maps.source,
        target_maps: maps.target,
        ground: records.ground,
        aerial: records.aerial,
        eval_routes: records.eval_routes,
    })
}

pub fn build_benchmark(
    cfg: &BenchmarkConfig,
    seed: u64,
    norm: &NormWindow,
) -> Result<Benchmark, PipelineError> {
    let (scene, pair_idx) = select_scene(cfg, seed)?;
    let target_params = cfg.target_params(seed);
    let mut pairs = Vec::with_capacity(pair_idx.len());
    for (p, &pair) in pair_idx.iter().enumerate() {
        let maps = simulate_pair(&scene, cfg, &target_params, pair)?;
        let records = pair_records(&scene, cfg, seed, p, pair, &maps)?;
        pairs.push(assemble_pair(&scene, cfg, pair, maps, records, norm)?);
    }
    Ok(Benchmark {
        scene,
        target_params,
        pairs,
    })
}
