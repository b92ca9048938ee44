//! Deterministic propagation surrogate producing per-transmitter 3-D RSRP maps.
//!
//! Received power is a log-distance model with separate LOS/NLOS exponents,
//! a per-wall penetration loss and an optional spatially correlated
//! shadowing field keyed by global voxel coordinates.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geoscene::{Scene, Transmitter};
use crate::grid::GridSpec;
use crate::rng;

#[derive(Error, Debug)]
pub enum PropError {
    #[error("invalid propagation params: {0}")]
    Params(String),
    #[error("radio map format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    pub pl_exponent_los: f64,
    pub pl_exponent_nlos: f64,
    /// dB at 1 m
    pub reference_loss: f64,
    /// dB per counted wall crossing
    pub wall_penetration: f64,
    pub max_counted_walls: u32,
    pub shadowing_sigma: f64,
    pub shadowing_corr_len: f64,
    pub rsrp_floor: f64,
    pub seed: u64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            pl_exponent_los: 2.0,
            pl_exponent_nlos: 3.2,
            reference_loss: 40.0,
            wall_penetration: 15.0,
            max_counted_walls: 3,
            shadowing_sigma: 0.0,
            shadowing_corr_len: 50.0,
            rsrp_floor: -140.0,
            seed: 0,
        }
    }
}

impl PropagationParams {
    /// Parameters emulating the measured ("real") domain for a source parameter set.
    pub fn shifted_target(&self) -> Self {
        Self {
            pl_exponent_nlos: self.pl_exponent_nlos + 0.4,
            wall_penetration: self.wall_penetration + 5.0,
            shadowing_sigma: 4.0,
            seed: rng::derive_seed(self.seed, "target-domain"),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PropError> {
        let bad = |m: &str| Err(PropError::Params(m.into()));
        if !(self.pl_exponent_los >= 1.5) {
            return bad("pl_exponent_los must be >= 1.5");
        }
        if !(self.pl_exponent_nlos >= self.pl_exponent_los) {
            return bad("pl_exponent_nlos must be >= pl_exponent_los");
        }
        if !(self.wall_penetration >= 0.0) {
            return bad("wall_penetration must be >= 0");
        }
        if !(self.shadowing_sigma >= 0.0) {
            return bad("shadowing_sigma must be >= 0");
        }
        if self.shadowing_sigma > 0.0 && !(self.shadowing_corr_len > 0.0) {
            return bad("shadowing_corr_len must be > 0");
        }
        if !(self.rsrp_floor < -100.0) {
            return bad("rsrp_floor must be < -100 dBm");
        }
        if !self.reference_loss.is_finite() {
            return bad("reference_loss must be finite");
        }
        Ok(())
    }
}

/// Per-transmitter RSRP voxel grid (dBm), x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct RadioMap {
    pub cell_id: String,
    pub grid: GridSpec,
    pub values: Vec<f32>,
}

impl RadioMap {
    pub fn value_at(&self, p: [f64; 3]) -> Option<f32> {
        self.grid.locate_index(p).map(|i| self.values[i])
    }

    /// Copy of the sub-block starting at voxel `offset` with `dims` voxels.
    pub fn crop(&self, offset: [usize; 3], dims: [usize; 3]) -> RadioMap {
        let g = &self.grid;
        let origin = [
            g.origin[0] + offset[0] as f64 * g.cell_size,
            g.origin[1] + offset[1] as f64 * g.cell_size,
            g.origin[2] + offset[2] as f64 * g.cell_size,
        ];
        let grid = GridSpec::new(origin, dims, g.cell_size);
        let mut values = Vec::with_capacity(grid.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let start = g.index(offset[0], offset[1] + y, offset[2] + z);
                values.extend_from_slice(&self.values[start..start + dims[0]]);
            }
        }
        RadioMap {
            cell_id: self.cell_id.clone(),
            grid,
            values,
        }
    }
}

/// Slab test of segment `a + t (b - a)`, `t ∈ [0, 1]`, against a box.
/// Returns the open parameter interval where the infinite line is inside the box.
fn slab_interval(a: [f64; 3], b: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let d = b[k] - a[k];
        if d == 0.0 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return None;
            }
        } else {
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((lo[k] - a[k]) * inv, (hi[k] - a[k]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t0 < t1).then_some((t0, t1))
}

/// Number of building-surface crossings along segment `a → b` (entries plus exits).
pub fn trace_occlusion(scene: &Scene, a: [f64; 3], b: [f64; 3]) -> u32 {
    let mut count = 0;
    for bld in &scene.buildings {
        let (z0, z1) = scene.building_z(bld);
        let Some((t0, t1)) = slab_interval(a, b, [bld.x0, bld.y0, z0], [bld.x1, bld.y1, z1]) else {
            continue;
        };
        if t1 <= 0.0 || t0 >= 1.0 {
            continue;
        }
        if t0 > 0.0 {
            count += 1;
        }
        if t1 < 1.0 {
            count += 1;
        }
    }
    count
}

/// Default lattice: covers the scene extent with `levels` vertical layers.
pub fn scene_grid(scene: &Scene, cell_size: f64, levels: usize) -> GridSpec {
    GridSpec::new(
        [0.0, 0.0, 0.0],
        [
            (scene.extent_x / cell_size).ceil() as usize,
            (scene.extent_y / cell_size).ceil() as usize,
            levels,
        ],
        cell_size,
    )
}

fn gaussian_taps(sigma_cells: f64) -> Vec<f64> {
    let half = (3.0 * sigma_cells).ceil().max(1.0) as i64;
    let mut w: Vec<f64> = (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sigma_cells).powi(2)).exp())
        .collect();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    w.iter_mut().for_each(|x| *x /= norm);
    w
}

/// Unit-variance correlated field on `grid`: white noise hashed from
/// `(seed, global voxel index)` smoothed by a separable Gaussian kernel.
fn shadowing_field(grid: &GridSpec, seed: u64, corr_len: f64) -> Vec<f64> {
    let taps = gaussian_taps((corr_len / grid.cell_size).max(0.25));
    let h = (taps.len() / 2) as i64;
    let [nx, ny, nz] = grid.dims;
    let p = [
        nx + 2 * h as usize,
        ny + 2 * h as usize,
        nz + 2 * h as usize,
    ];
    let g0 = grid.global_index(0, 0, 0);
    let mut buf = vec![0.0; p[0] * p[1] * p[2]];
    buf.par_chunks_mut(p[0]).enumerate().for_each(|(row, out)| {
        let y = (row % p[1]) as i64 - h + g0[1];
        let z = (row / p[1]) as i64 - h + g0[2];
        for (xi, o) in out.iter_mut().enumerate() {
            let x = xi as i64 - h + g0[0];
            let key = rng::mix64(
                seed ^ rng::mix64(x as u64 ^ rng::mix64(y as u64 ^ rng::mix64(z as u64))),
            );
            *o = rng::hashed_normal(key);
        }
    });
    // Separable passes; each pass shrinks one padded axis.
    let conv_axis = |src: &[f64], sd: [usize; 3], axis: usize| -> (Vec<f64>, [usize; 3]) {
        let mut od = sd;
        od[axis] = sd[axis] - 2 * h as usize;
        let mut out = vec![0.0; od[0] * od[1] * od[2]];
        out.par_chunks_mut(od[0]).enumerate().for_each(|(row, o)| {
            let y = row % od[1];
            let z = row / od[1];
            for (x, v) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, w) in taps.iter().enumerate() {
                    let (sx, sy, sz) = match axis {
                        0 => (x + k, y, z),
                        1 => (x, y + k, z),
                        _ => (x, y, z + k),
                    };
                    acc += w * src[(sz * sd[1] + sy) * sd[0] + sx];
                }
                *v = acc;
            }
        });
        (out, od)
    };
    let (a, da) = conv_axis(&buf, p, 0);
    let (b, db) = conv_axis(&a, da, 1);
    let (c, _) = conv_axis(&b, db, 2);
    c
}

pub fn compute_radio_map(
    scene: &Scene,
    tx: &Transmitter,
    params: &PropagationParams,
    grid: &GridSpec,
) -> Result<RadioMap, PropError> {
    params.validate()?;
    let shadow = if params.shadowing_sigma > 0.0 {
        let seed = rng::derive_seed(params.seed, &format!("shadow/{}", tx.cell_id));
        Some(shadowing_field(grid, seed, params.shadowing_corr_len))
    } else {
        None
    };
    let min_d = 0.5 * grid.cell_size;
    let cap = params.max_counted_walls;
    let mut values = vec![0f32; grid.len()];
    values.par_iter_mut().enumerate().for_each(|(i, out)| {
        let v = grid.center_of(i);
        let d = ((v[0] - tx.position[0]).powi(2)
            + (v[1] - tx.position[1]).powi(2)
            + (v[2] - tx.position[2]).powi(2))
        .sqrt()
        .max(min_d);
        let walls = trace_occlusion(scene, tx.position, v);
        let n = if walls == 0 {
            params.pl_exponent_los
        } else {
            params.pl_exponent_nlos
        };
        let mut rsrp = tx.tx_power
            - params.reference_loss
            - 10.0 * n * d.log10()
            - params.wall_penetration * f64::from(walls.min(cap));
        if let Some(s) = &shadow {
            rsrp -= params.shadowing_sigma * s[i];
        }
        *out = rsrp.clamp(params.rsrp_floor, tx.tx_power) as f32;
    });
    Ok(RadioMap {
        cell_id: tx.cell_id.clone(),
        grid: grid.clone(),
        values,
    })
}

/// One map per transmitter, in scene order.
pub fn compute_all(
    scene: &Scene,
    params: &PropagationParams,
    grid: &GridSpec,
) -> Result<Vec<RadioMap>, PropError> {
    scene
        .transmitters
        .iter()
        .map(|tx| compute_radio_map(scene, tx, params, grid))
        .collect()
}

const RMAP_MAGIC: &[u8; 4] = b"RMAP";
const RMAP_VERSION: u8 = 1;
const RMAP_HEADER: usize = 64;
const RMAP_MAX_ID: usize = 14;

/// Binary layout (little-endian): magic `RMAP` | version u8 | id length u8 |
/// id bytes (14, zero padded) | origin 3×f64 | dims 3×u32 | cell size f64 |
/// values f32, x-fastest.
pub fn write_radio_map<W: Write>(map: &RadioMap, mut w: W) -> Result<(), PropError> {
    let id = map.cell_id.as_bytes();
    if id.len() > RMAP_MAX_ID {
        return Err(PropError::Format(format!(
            "cell id longer than {RMAP_MAX_ID} bytes"
        )));
    }
    if map.values.len() != map.grid.len() {
        return Err(PropError::Format("value count does not match dims".into()));
    }
    let mut h = [0u8; RMAP_HEADER];
    h[0..4].copy_from_slice(RMAP_MAGIC);
    h[4] = RMAP_VERSION;
    h[5] = id.len() as u8;
    h[6..6 + id.len()].copy_from_slice(id);
    for k in 0..3 {
        h[20 + 8 * k..28 + 8 * k].copy_from_slice(&map.grid.origin[k].to_le_bytes());
        let d = u32::try_from(map.grid.dims[k])
            .map_err(|_| PropError::Format("dimension exceeds u32".into()))?;
        h[44 + 4 * k..48 + 4 * k].copy_from_slice(&d.to_le_bytes());
    }
    h[56..64].copy_from_slice(&map.grid.cell_size.to_le_bytes());
    w.write_all(&h)?;
    let mut body = Vec::with_capacity(4 * map.values.len());
    for v in &map.values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_radio_map<R: Read>(mut r: R) -> Result<RadioMap, PropError> {
    let mut h = [0u8; RMAP_HEADER];
    r.read_exact(&mut h)
        .map_err(|_| PropError::Format("truncated header".into()))?;
    if &h[0..4] != RMAP_MAGIC {
        return Err(PropError::Format("bad magic".into()));
    }
    if h[4] != RMAP_VERSION {
        return Err(PropError::Format(format!("unsupported version {}", h[4])));
    }
    let n = h[5] as usize;
    if n > RMAP_MAX_ID {
        return Err(PropError::Format("cell id length out of range".into()));
    }
    let cell_id = String::from_utf8(h[6..6 + n].to_vec())
        .map_err(|_| PropError::Format("cell id not utf-8".into()))?;
    let f = |o: usize| f64::from_le_bytes(h[o..o + 8].try_into().unwrap());
    let u = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap()) as usize;
    let grid = GridSpec::new([f(20), f(28), f(36)], [u(44), u(48), u(52)], f(56));
    let mut body = vec![0u8; 4 * grid.len()];
    r.read_exact(&mut body)
        .map_err(|_| PropError::Format("truncated value block".into()))?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(PropError::Format("trailing bytes after value block".into()));
    }
    Ok(RadioMap {
        cell_id,
        grid,
        values,
    })
}

pub fn save_radio_map(map: &RadioMap, path: &Path) -> Result<(), PropError> {
    let f = std::fs::File::create(path)?;
    write_radio_map(map, std::io::BufWriter::new(f))
}

pub fn load_radio_map(path: &Path) -> Result<RadioMap, PropError> {
    read_radio_map(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geoscene::{Building, Terrain};

    fn scene(buildings: Vec<Building>) -> Scene {
        Scene {
            extent_x: 1000.0,
            extent_y: 1000.0,
            terrain: Terrain::flat(1000.0, 1000.0, 100.0),
            buildings,
            transmitters: vec![Transmitter {
                cell_id: "c0".into(),
                position: [0.0, 0.0, 0.0],
                tx_power: 30.0,
                frequency: 3.5,
            }],
        }
    }

    fn one_voxel_grid(center: [f64; 3]) -> GridSpec {
        GridSpec::new(
            [center[0] - 0.5, center[1] - 0.5, center[2] - 0.5],
            [1, 1, 1],
            1.0,
        )
    }

    fn point_value(s: &Scene, tx: &Transmitter, p: &PropagationParams, at: [f64; 3]) -> f32 {
        compute_radio_map(s, tx, p, &one_voxel_grid(at))
            .unwrap()
            .values[0]
    }

    #[test]
    fn occlusion_counts() {
        let s = scene(vec![]);
        assert_eq!(trace_occlusion(&s, [0.0, 0.0, 1.0], [900.0, 900.0, 1.0]), 0);
        let s = scene(vec![Building {
            x0: 100.0,
            y0: -10.0 + 10.0,
            x1: 120.0,
            y1: 20.0,
            height: 30.0,
        }]);
        assert_eq!(
            trace_occlusion(&s, [50.0, 10.0, 5.0], [200.0, 10.0, 5.0]),
            2
        );
        assert_eq!(
            trace_occlusion(&s, [200.0, 10.0, 5.0], [50.0, 10.0, 5.0]),
            2
        );
        // ends inside the box: entry only
        assert_eq!(
            trace_occlusion(&s, [50.0, 10.0, 5.0], [110.0, 10.0, 5.0]),
            1
        );
        // passes over the roof
        assert_eq!(
            trace_occlusion(&s, [50.0, 10.0, 40.0], [200.0, 10.0, 40.0]),
            0
        );
    }

    #[test]
    fn free_space_examples() {
        let s = scene(vec![]);
        let tx = s.transmitters[0].clone();
        let p = PropagationParams::default();
        assert_eq!(point_value(&s, &tx, &p, [100.0, 0.0, 0.0]), -50.0);
        let v = point_value(&s, &tx, &p, [200.0, 0.0, 0.0]);
        assert!((f64::from(v) + 56.0206).abs() < 1e-3, "{v}");
    }

    #[test]
    fn one_wall_example() {
        // box straddles the path so exactly one surface is crossed before the voxel
        let s = scene(vec![Building {
            x0: 50.0,
            y0: -20.0,
            x1: 150.0,
            y1: 20.0,
            height: 30.0,
        }]);
        let tx = Transmitter {
            position: [0.0, 0.0, 10.0],
            ..s.transmitters[0].clone()
        };
        let p = PropagationParams {
            pl_exponent_nlos: 3.0,
            wall_penetration: 15.0,
            ..Default::default()
        };
        assert_eq!(trace_occlusion(&s, tx.position, [100.0, 0.0, 10.0]), 1);
        let v = point_value(&s, &tx, &p, [100.0, 0.0, 10.0]);
        assert_eq!(v, -85.0);
    }

    #[test]
    fn coincident_voxel_is_finite() {
        let s = scene(vec![]);
        let tx = Transmitter {
            position: [500.0, 500.0, 25.0],
            ..s.transmitters[0].clone()
        };
        let g = GridSpec::new([495.0, 495.0, 20.0], [1, 1, 1], 10.0);
        let m = compute_radio_map(&s, &tx, &PropagationParams::default(), &g).unwrap();
        // d = cell_size / 2 = 5 m
        let expected = 30.0 - 40.0 - 20.0 * 5f64.log10();
        assert!((f64::from(m.values[0]) - expected).abs() < 1e-4);
    }

    #[test]
    fn clamping_and_determinism() {
        let s = scene(vec![Building {
            x0: 300.0,
            y0: 300.0,
            x1: 400.0,
            y1: 400.0,
            height: 80.0,
        }]);
        let tx = Transmitter {
            position: [100.0, 100.0, 25.0],
            ..s.transmitters[0].clone()
        };
        let p = PropagationParams {
            shadowing_sigma: 30.0,
            rsrp_floor: -110.0,
            ..Default::default()
        };
        let g = GridSpec::new([0.0; 3], [40, 40, 4], 25.0);
        let a = compute_radio_map(&s, &tx, &p, &g).unwrap();
        let b = compute_radio_map(&s, &tx, &p, &g).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| (-110.0..=30.0).contains(&v)));
        assert!(a.values.iter().any(|&v| v == -110.0));
    }

    #[test]
    fn shadowing_depends_on_global_position_only() {
        let s = scene(vec![]);
        let tx = Transmitter {
            position: [500.0, 500.0, 25.0],
            ..s.transmitters[0].clone()
        };
        let p = PropagationParams {
            shadowing_sigma: 4.0,
            seed: 9,
            ..Default::default()
        };
        let full =
            compute_radio_map(&s, &tx, &p, &GridSpec::new([0.0; 3], [60, 60, 8], 10.0)).unwrap();
        let sub = compute_radio_map(
            &s,
            &tx,
            &p,
            &GridSpec::new([200.0, 300.0, 0.0], [20, 10, 8], 10.0),
        )
        .unwrap();
        assert_eq!(sub, full.crop([20, 30, 0], [20, 10, 8]));
    }

    #[test]
    fn shadowing_has_target_sigma() {
        let g = GridSpec::new([0.0; 3], [64, 64, 16], 10.0);
        let f = shadowing_field(&g, 3, 30.0);
        let n = f.len() as f64;
        let m = f.iter().sum::<f64>() / n;
        let v = f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 0.2 && (v - 1.0).abs() < 0.3, "mean {m} var {v}");
    }

    #[test]
    fn compute_all_order_and_empty() {
        let mut s = scene(vec![]);
        s.transmitters.push(Transmitter {
            cell_id: "c1".into(),
            position: [300.0, 0.0, 25.0],
            tx_power: 20.0,
            frequency: 2.0,
        });
        let g = GridSpec::new([0.0; 3], [10, 10, 2], 10.0);
        let p = PropagationParams::default();
        let all = compute_all(&s, &p, &g).unwrap();
        assert_eq!(all.len(), 2);
        for (m, tx) in all.iter().zip(&s.transmitters) {
            assert_eq!(m, &compute_radio_map(&s, tx, &p, &g).unwrap());
        }
        s.transmitters.clear();
        assert!(compute_all(&s, &p, &g).unwrap().is_empty());
    }

    #[test]
    fn params_validation() {
        let p = PropagationParams {
            pl_exponent_nlos: 1.9,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = PropagationParams {
            rsrp_floor: -90.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let t = PropagationParams::default().shifted_target();
        assert!((t.pl_exponent_nlos - 3.6).abs() < 1e-12);
        assert_eq!(t.wall_penetration, 20.0);
        assert_eq!(t.shadowing_sigma, 4.0);
    }

    #[test]
    fn rmap_roundtrip_and_rejects() {
        let m = RadioMap {
            cell_id: "cell-001".into(),
            grid: GridSpec::new([1.5, -2.25, 0.0], [3, 2, 2], 10.0),
            values: (0..12).map(|i| -80.0 - i as f32 * 0.37).collect(),
        };
        let mut buf = Vec::new();
        write_radio_map(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 64 + 12 * 4);
        assert_eq!(&buf[0..4], b"RMAP");
        assert_eq!(read_radio_map(&buf[..]).unwrap(), m);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_radio_map(&bad[..]).is_err());
        assert!(read_radio_map(&buf[..buf.len() - 1]).is_err());
        let long = RadioMap {
            cell_id: "x".repeat(15),
            ..m
        };
        assert!(write_radio_map(&long, Vec::new()).is_err());
    }
}
