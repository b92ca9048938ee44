//! Observation artifacts: distance-biased masks, masked two-channel grids,
//! ground/aerial measurement sets, UAV routes and voxel rasterization.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geoscene::Scene;
use crate::grid::GridSpec;
use crate::propsim::RadioMap;
use crate::rng;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("grid mismatch: {0}")]
    Shape(String),
    #[error(
        "requested {requested} ground samples but only {available} outdoor voxels are available"
    )]
    NotEnoughVoxels { requested: usize, available: usize },
    #[error("measurement {index} at ({x:.3}, {y:.3}, {z:.3}) lies outside the grid")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        z: f64,
    },
    #[error("measurement file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Retention probabilities per distance band: near (≤ r1), mid (≤ r2), far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub r1: f64,
    pub r2: f64,
    pub p_near: f64,
    pub p_mid: f64,
    pub p_far: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            r1: 150.0,
            r2: 400.0,
            p_near: 0.8,
            p_mid: 0.2,
            p_far: 0.1,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.r1 > 0.0 && self.r1 < self.r2) {
            return Err(DataError::Config(format!(
                "mask radii must satisfy 0 < r1 < r2 (got {} / {})",
                self.r1, self.r2
            )));
        }
        if !(0.0 < self.p_far
            && self.p_far < self.p_mid
            && self.p_mid < self.p_near
            && self.p_near < 1.0)
        {
            return Err(DataError::Config(format!(
                "mask probabilities must satisfy 0 < p_far < p_mid < p_near < 1 (got {}, {}, {})",
                self.p_near, self.p_mid, self.p_far
            )));
        }
        Ok(())
    }

    /// Band index (0 near, 1 mid, 2 far) for a distance.
    pub fn band(&self, d: f64) -> usize {
        if d <= self.r1 {
            0
        } else if d <= self.r2 {
            1
        } else {
            2
        }
    }

    pub fn probability(&self, d: f64) -> f64 {
        [self.p_near, self.p_mid, self.p_far][self.band(d)]
    }
}

/// RSRP normalization window in dBm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for NormWindow {
    fn default() -> Self {
        Self {
            lo: -140.0,
            hi: -40.0,
        }
    }
}

impl NormWindow {
    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    /// Linear scaling without clamping.
    pub fn scale(&self, dbm: f64) -> f64 {
        (dbm - self.lo) / (self.hi - self.lo)
    }

    pub fn normalize(&self, dbm: f64) -> f64 {
        self.scale(dbm).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.lo + v * (self.hi - self.lo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub grid: GridSpec,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Masked observation: normalized value channel plus 0/1 mask channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
}

impl GridSample {
    pub fn empty(grid: &GridSpec) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
            mask: vec![0.0; grid.len()],
        }
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Ground,
    Aerial,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Ground => "ground",
            Domain::Aerial => "aerial",
        }
    }
}

/// Ground samples sit below this altitude.
pub const GROUND_CEILING: f64 = 50.0;
pub const GROUND_HEIGHT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub position: [f64; 3],
    pub rsrp: f64,
    pub cell_id: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub domain: Domain,
    pub items: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(domain: Domain) -> Self {
        Self {
            domain,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, m: Measurement) -> Result<(), DataError> {
        if m.domain != self.domain {
            return Err(DataError::Config(format!(
                "{} measurement in {} set",
                m.domain.as_str(),
                self.domain.as_str()
            )));
        }
        if m.domain == Domain::Ground && !(m.position[2] < GROUND_CEILING) {
            return Err(DataError::Config(format!(
                "ground measurement at altitude {} m",
                m.position[2]
            )));
        }
        if !m.rsrp.is_finite() {
            return Err(DataError::Config("non-finite rsrp".into()));
        }
        self.items.push(m);
        Ok(())
    }

    /// Measurements whose position falls inside `grid`.
    pub fn within(&self, grid: &GridSpec) -> MeasurementSet {
        MeasurementSet {
            domain: self.domain,
            items: self
                .items
                .iter()
                .filter(|m| grid.locate(m.position).is_some())
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<[f64; 3]>,
    pub sample_spacing: f64,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Points every `sample_spacing` meters of arc length, starting at the first waypoint.
    pub fn sample_points(&self) -> Vec<([f64; 3], f64)> {
        let mut out = Vec::new();
        let mut next = 0.0;
        let mut base = 0.0;
        for w in self.waypoints.windows(2) {
            let seg = dist(w[0], w[1]);
            while next <= base + seg + 1e-9 {
                let t = if seg > 0.0 {
                    ((next - base) / seg).min(1.0)
                } else {
                    0.0
                };
                let p = [0, 1, 2].map(|k| w[0][k] + t * (w[1][k] - w[0][k]));
                out.push((p, next));
                next += self.sample_spacing;
            }
            base += seg;
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Distance-biased retention mask around `tx_pos`.
pub fn sample_mask(
    grid: &GridSpec,
    tx_pos: [f64; 3],
    params: &MaskParams,
    seed: u64,
) -> Result<Mask, DataError> {
    params.validate()?;
    let mut r = rng::stream(seed, "mask");
    let bits = (0..grid.len())
        .map(|i| {
            let p = params.probability(dist(grid.center_of(i), tx_pos));
            r.gen::<f64>() < p
        })
        .collect();
    Ok(Mask {
        grid: grid.clone(),
        bits,
    })
}

pub fn apply_mask(map: &RadioMap, mask: &Mask, norm: &NormWindow) -> Result<GridSample, DataError> {
    if map.grid != mask.grid {
        return Err(DataError::Shape("mask grid differs from map grid".into()));
    }
    if !(norm.lo < norm.hi) {
        return Err(DataError::Config(
            "normalization window requires lo < hi".into(),
        ));
    }
    let mut out = GridSample::empty(&map.grid);
    for (i, (&v, &b)) in map.values.iter().zip(&mask.bits).enumerate() {
        if b {
            out.values[i] = norm.normalize(f64::from(v));
            out.mask[i] = 1.0;
        }
    }
    Ok(out)
}

/// Full map normalized into `[0, 1]`.
pub fn normalized_map(map: &RadioMap, norm: &NormWindow) -> Vec<f64> {
    map.values
        .iter()
        .map(|&v| norm.normalize(f64::from(v)))
        .collect()
}

/// Ground-sampling controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundParams {
    pub n_samples: usize,
    /// Reporting noise standard deviation in dB.
    pub report_sigma: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            n_samples: 6000,
            report_sigma: 2.0,
        }
    }
}

/// Crowdsourced-style ground samples for one cell: dense near the
/// transmitter with band weights from `bands`, 1.5 m above terrain,
/// outdoor only, with Gaussian reporting noise.
pub fn synthesize_ground(
    map: &RadioMap,
    scene: &Scene,
    tx_pos: [f64; 3],
    bands: &MaskParams,
    params: &GroundParams,
    seed: u64,
) -> Result<MeasurementSet, DataError> {
    if params.n_samples == 0 {
        return Err(DataError::Config("n_samples must be > 0".into()));
    }
    bands.validate()?;
    let g = &map.grid;
    let mut cells = Vec::new();
    let mut weights = Vec::new();
    for iy in 0..g.dims[1] {
        for ix in 0..g.dims[0] {
            let c = g.center(ix, iy, 0);
            if !scene.is_outdoor(c[0], c[1]) {
                continue;
            }
            let z = scene.terrain.elevation(c[0], c[1]) + GROUND_HEIGHT;
            if g.locate([c[0], c[1], z]).is_none() {
                continue;
            }
            cells.push((ix, iy));
            weights.push(bands.probability(dist([c[0], c[1], z], tx_pos)));
        }
    }
    if params.n_samples > cells.len() {
        return Err(DataError::NotEnoughVoxels {
            requested: params.n_samples,
            available: cells.len(),
        });
    }
    let pick = WeightedIndex::new(&weights).map_err(|e| DataError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, params.report_sigma.max(0.0))
        .map_err(|e| DataError::Config(e.to_string()))?;
    let mut r = rng::stream(seed, "ground");
    let mut out = MeasurementSet::new(Domain::Ground);
    let half = 0.5 * g.cell_size;
    while out.len() < params.n_samples {
        let (ix, iy) = cells[pick.sample(&mut r)];
        let c = g.center(ix, iy, 0);
        let (jx, jy): (f64, f64) = (r.gen_range(-half..half), r.gen_range(-half..half));
        let (mut x, mut y) = (c[0] + jx, c[1] + jy);
        if !scene.is_outdoor(x, y) {
            x = c[0];
            y = c[1];
        }
        let z = scene.terrain.elevation(x, y) + GROUND_HEIGHT;
        let Some(truth) = map.value_at([x, y, z]) else {
            continue;
        };
        let e = if params.report_sigma > 0.0 {
            noise.sample(&mut r)
        } else {
            0.0
        };
        out.push(Measurement {
            position: [x, y, z],
            rsrp: f64::from(truth) + e,
            cell_id: map.cell_id.clone(),
            domain: Domain::Ground,
        })?;
    }
    Ok(out)
}

/// Horizontal rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn of_scene(scene: &Scene) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: scene.extent_x,
            y1: scene.extent_y,
        }
    }

    pub fn of_grid(grid: &GridSpec) -> Self {
        let hi = grid.max_corner();
        Self {
            x0: grid.origin[0],
            y0: grid.origin[1],
            x1: hi[0],
            y1: hi[1],
        }
    }
}

/// Piecewise-linear constant-altitude routes with 3–6 waypoints.
pub fn generate_routes(
    area: &Bounds,
    n_routes: usize,
    altitude_band: (f64, f64),
    sample_spacing: f64,
    seed: u64,
) -> Result<Vec<Route>, DataError> {
    let (lo, hi) = altitude_band;
    if !(60.0 <= lo && lo <= hi && hi <= 200.0) {
        return Err(DataError::Config(format!(
            "altitude band ({lo}, {hi}) must lie within [60, 200] m"
        )));
    }
    if !(sample_spacing > 0.0) {
        return Err(DataError::Config("sample_spacing must be > 0".into()));
    }
    let margin = 0.05 * (area.x1 - area.x0).min(area.y1 - area.y0);
    let mut r = rng::stream(seed, "routes");
    let mut routes = Vec::with_capacity(n_routes);
    for _ in 0..n_routes {
        let n = r.gen_range(3..=6);
        let z = if hi > lo { r.gen_range(lo..hi) } else { lo };
        let waypoints = (0..n)
            .map(|_| {
                [
                    r.gen_range(area.x0 + margin..area.x1 - margin),
                    r.gen_range(area.y0 + margin..area.y1 - margin),
                    z,
                ]
            })
            .collect();
        routes.push(Route {
            waypoints,
            sample_spacing,
        });
    }
    Ok(routes)
}

/// Aerial samples along routes from the target map, thinned with
/// `keep_prob` and capped at `max_ratio * ground_count`.
pub fn sample_route_measurements(
    target_map: &RadioMap,
    routes: &[Route],
    keep_prob: f64,
    seed: u64,
    max_ratio: Option<f64>,
    ground_count: usize,
) -> Result<MeasurementSet, DataError> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(DataError::Config("keep_prob must lie in (0, 1]".into()));
    }
    let mut r = rng::stream(seed, "route-samples");
    let mut kept = Vec::new();
    for route in routes {
        for (p, _) in route.sample_points() {
            if r.gen::<f64>() < keep_prob {
                if let Some(v) = target_map.value_at(p) {
                    kept.push(Measurement {
                        position: p,
                        rsrp: f64::from(v),
                        cell_id: target_map.cell_id.clone(),
                        domain: Domain::Aerial,
                    });
                }
            }
        }
    }
    if let Some(ratio) = max_ratio {
        let cap = (ratio * ground_count as f64).floor() as usize;
        if kept.len() > cap {
            let mut r = rng::stream(seed, "route-cap");
            let mut idx = index_sample(&mut r, kept.len(), cap).into_vec();
            idx.sort_unstable();
            kept = idx.into_iter().map(|i| kept[i].clone()).collect();
        }
    }
    Ok(MeasurementSet {
        domain: Domain::Aerial,
        items: kept,
    })
}

/// Voxel means of the measurements, normalized, with occupied voxels flagged.
pub fn rasterize(
    ms: &MeasurementSet,
    grid: &GridSpec,
    norm: &NormWindow,
) -> Result<GridSample, DataError> {
    let mut sum = vec![0.0; grid.len()];
    let mut cnt = vec![0u32; grid.len()];
    for (index, m) in ms.items.iter().enumerate() {
        let i = grid
            .locate_index(m.position)
            .ok_or(DataError::OutOfBounds {
                index,
                x: m.position[0],
                y: m.position[1],
                z: m.position[2],
            })?;
        sum[i] += m.rsrp;
        cnt[i] += 1;
    }
    let mut out = GridSample::empty(grid);
    for i in 0..grid.len() {
        if cnt[i] > 0 {
            out.values[i] = norm.normalize(sum[i] / f64::from(cnt[i]));
            out.mask[i] = 1.0;
        }
    }
    Ok(out)
}

pub const MEASUREMENT_HEADER: &str = "x,y,z,cell_id,rsrp_dbm,domain";

pub fn measurements_to_csv(ms: &MeasurementSet) -> String {
    let mut s = String::with_capacity(48 * (ms.len() + 1));
    s.push_str(MEASUREMENT_HEADER);
    s.push('\n');
    for m in &ms.items {
        let _ = writeln!(
            s,
            "{:.3},{:.3},{:.3},{},{:.2},{}",
            m.position[0],
            m.position[1],
            m.position[2],
            m.cell_id,
            m.rsrp,
            m.domain.as_str()
        );
    }
    s
}

pub fn save_measurements(ms: &MeasurementSet, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, measurements_to_csv(ms))?;
    Ok(())
}

pub fn parse_measurements(text: &str) -> Result<MeasurementSet, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MEASUREMENT_HEADER => {}
        _ => {
            return Err(DataError::Parse {
                line: 1,
                msg: format!("expected header `{MEASUREMENT_HEADER}`"),
            })
        }
    }
    let mut set: Option<MeasurementSet> = None;
    for (i, l) in lines {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let num = |k: usize, name: &str| -> Result<f64, DataError> {
            f[k].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    msg: format!("field `{name}`: bad number `{}`", f[k]),
                })
        };
        let position = [num(0, "x")?, num(1, "y")?, num(2, "z")?];
        if f[3].is_empty() {
            return Err(DataError::Parse {
                line,
                msg: "missing cell_id".into(),
            });
        }
        let rsrp = num(4, "rsrp_dbm")?;
        let domain = match f[5] {
            "ground" => Domain::Ground,
            "aerial" => Domain::Aerial,
            other => {
                return Err(DataError::Parse {
                    line,
                    msg: format!("domain `{other}` not in {{ground, aerial}}"),
                })
            }
        };
        let s = set.get_or_insert_with(|| MeasurementSet::new(domain));
        s.push(Measurement {
            position,
            rsrp,
            cell_id: f[3].to_string(),
            domain,
        })
        .map_err(|e| DataError::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    Ok(set.unwrap_or_else(|| MeasurementSet::new(Domain::Ground)))
}

pub fn load_measurements(path: &Path) -> Result<MeasurementSet, DataError> {
    parse_measurements(&std::fs::read_to_string(path)?)
}
