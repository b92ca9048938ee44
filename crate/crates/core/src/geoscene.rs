//! Urban scene geometry: terrain heightfield, box buildings and transmitters.
//!
//! Scenes are either generated procedurally from a seed or read from the
//! plain-text scene format written by [`write_scene`].

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Error, Debug)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("could not place {wanted} buildings within {retries} attempts (placed {placed})")]
    Placement {
        wanted: usize,
        placed: usize,
        retries: usize,
    },
    #[error("scene parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid building {index}: {msg}")]
    Building { index: usize, msg: String },
    #[error("invalid transmitter {index}: {msg}")]
    Transmitter { index: usize, msg: String },
    #[error("at least one transmitter required")]
    NoTransmitters,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// Height above the terrain at the footprint center.
    pub height: f64,
}

impl Building {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn overlaps(&self, other: &Building, gap: f64) -> bool {
        self.x0 < other.x1 + gap
            && other.x0 < self.x1 + gap
            && self.y0 < other.y1 + gap
            && other.y0 < self.y1 + gap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub cell_id: String,
    pub position: [f64; 3],
    /// dBm
    pub tx_power: f64,
    /// GHz
    pub frequency: f64,
}

/// Elevation samples at `(i * spacing, j * spacing)`, x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub elevations: Vec<f64>,
}

impl Terrain {
    pub fn flat(extent_x: f64, extent_y: f64, spacing: f64) -> Self {
        let nx = (extent_x / spacing).ceil() as usize + 1;
        let ny = (extent_y / spacing).ceil() as usize + 1;
        Self {
            nx,
            ny,
            spacing,
            elevations: vec![0.0; nx * ny],
        }
    }

    /// Bilinear elevation, clamped to the sampled area.
    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let fx = (x / self.spacing).clamp(0.0, (self.nx - 1) as f64);
        let fy = (y / self.spacing).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(self.ny.saturating_sub(2));
        let i1 = (i0 + 1).min(self.nx - 1);
        let j1 = (j0 + 1).min(self.ny - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let e = |i: usize, j: usize| self.elevations[j * self.nx + i];
        let a = e(i0, j0) * (1.0 - tx) + e(i1, j0) * tx;
        let b = e(i0, j1) * (1.0 - tx) + e(i1, j1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent_x: f64,
    pub extent_y: f64,
    pub terrain: Terrain,
    pub buildings: Vec<Building>,
    pub transmitters: Vec<Transmitter>,
}

impl Scene {
    /// Vertical extent `[base, top]` of a building.
    pub fn building_z(&self, b: &Building) -> (f64, f64) {
        let base = self
            .terrain
            .elevation(0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1));
        (base, base + b.height)
    }

    pub fn is_outdoor(&self, x: f64, y: f64) -> bool {
        !self.buildings.iter().any(|b| b.contains_xy(x, y))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.extent_x > 0.0 && self.extent_y > 0.0) {
            return Err(SceneError::Config("extent must be positive".into()));
        }
        if self.terrain.elevations.len() != self.terrain.nx * self.terrain.ny
            || self.terrain.nx < 2
            || self.terrain.ny < 2
        {
            return Err(SceneError::Config("terrain grid size mismatch".into()));
        }
        if !(self.terrain.spacing > 0.0) || self.terrain.elevations.iter().any(|e| !e.is_finite()) {
            return Err(SceneError::Config(
                "terrain elevations must be finite".into(),
            ));
        }
        for (index, b) in self.buildings.iter().enumerate() {
            let msg = if !(b.x0 < b.x1) {
                Some("x0 must be < x1")
            } else if !(b.y0 < b.y1) {
                Some("y0 must be < y1")
            } else if !(b.height >= 0.0) {
                Some("height must be >= 0")
            } else if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > self.extent_x || b.y1 > self.extent_y {
                Some("footprint outside scene extent")
            } else {
                None
            };
            if let Some(msg) = msg {
                return Err(SceneError::Building {
                    index,
                    msg: msg.into(),
                });
            }
        }
        if self.transmitters.is_empty() {
            return Err(SceneError::NoTransmitters);
        }
        for (index, t) in self.transmitters.iter().enumerate() {
            let [x, y, z] = t.position;
            let msg = if !(0.0..=self.extent_x).contains(&x) || !(0.0..=self.extent_y).contains(&y)
            {
                Some("position outside scene extent".to_string())
            } else if z < self.terrain.elevation(x, y) {
                Some("position below terrain".to_string())
            } else if !(0.0..=60.0).contains(&t.tx_power) {
                Some(format!("tx_power {} outside [0, 60] dBm", t.tx_power))
            } else if !(t.frequency > 0.4 && t.frequency < 6.0) {
                Some(format!("frequency {} outside (0.4, 6.0) GHz", t.frequency))
            } else if t.cell_id.is_empty() || t.cell_id.contains(char::is_whitespace) {
                Some("cell_id must be non-empty without whitespace".to_string())
            } else {
                None
            };
            if let Some(msg) = msg {
                return Err(SceneError::Transmitter { index, msg });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent_x: f64,
    pub extent_y: f64,
    pub n_buildings: usize,
    /// Footprint side length range in meters.
    pub building_size: (f64, f64),
    pub building_height: (f64, f64),
    /// Minimum clearance between footprints.
    pub building_gap: f64,
    pub n_transmitters: usize,
    /// Mast height above terrain.
    pub mast_height: (f64, f64),
    pub tx_power: f64,
    pub frequency: f64,
    pub terrain_spacing: f64,
    /// Amplitude of the sinusoidal relief; 0 keeps the terrain flat.
    pub terrain_relief: f64,
    pub terrain_wavelength: f64,
    pub placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent_x: 1000.0,
            extent_y: 1000.0,
            n_buildings: 60,
            building_size: (20.0, 60.0),
            building_height: (10.0, 60.0),
            building_gap: 10.0,
            n_transmitters: 10,
            mast_height: (25.0, 25.0),
            tx_power: 30.0,
            frequency: 3.5,
            terrain_spacing: 50.0,
            terrain_relief: 0.0,
            terrain_wavelength: 400.0,
            placement_retries: 20_000,
        }
    }
}

impl SceneConfig {
    fn check(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.into()));
        if !(self.extent_x >= 100.0 && self.extent_y >= 100.0) {
            return bad("extent must be at least 100 m on each side");
        }
        if !(self.building_size.0 > 0.0 && self.building_size.0 <= self.building_size.1) {
            return bad("building_size range invalid");
        }
        if self.building_size.1 >= self.extent_x.min(self.extent_y) {
            return bad("building_size exceeds extent");
        }
        if !(self.building_height.0 >= 0.0 && self.building_height.0 <= self.building_height.1) {
            return bad("building_height range invalid");
        }
        if !(self.mast_height.0 >= 0.0 && self.mast_height.0 <= self.mast_height.1) {
            return bad("mast_height range invalid");
        }
        if !(0.0..=60.0).contains(&self.tx_power) {
            return bad("tx_power outside [0, 60] dBm");
        }
        if !(self.frequency > 0.4 && self.frequency < 6.0) {
            return bad("frequency outside (0.4, 6.0) GHz");
        }
        if !(self.terrain_spacing > 0.0
            && self.terrain_relief >= 0.0
            && self.terrain_wavelength > 0.0)
        {
            return bad("terrain parameters invalid");
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Procedurally generate a scene. Deterministic in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    cfg.check()?;
    let mut terrain = Terrain::flat(cfg.extent_x, cfg.extent_y, cfg.terrain_spacing);
    if cfg.terrain_relief > 0.0 {
        let mut r = rng::stream(seed, "scene.terrain");
        #[allow(clippy::approx_constant)]
        let phase: (f64, f64) = (r.gen_range(0.0..6.283), r.gen_range(0.0..6.283));
        let k = 2.0 * std::f64::consts::PI / cfg.terrain_wavelength;
        for j in 0..terrain.ny {
            for i in 0..terrain.nx {
                let x = i as f64 * terrain.spacing;
                let y = j as f64 * terrain.spacing;
                terrain.elevations[j * terrain.nx + i] = 0.5
                    * cfg.terrain_relief
                    * (2.0 + (k * x + phase.0).sin() + (k * y + phase.1).cos());
            }
        }
    }

    let mut r = rng::stream(seed, "scene.buildings");
    let mut buildings: Vec<Building> = Vec::with_capacity(cfg.n_buildings);
    let mut attempts = 0usize;
    while buildings.len() < cfg.n_buildings {
        if attempts >= cfg.placement_retries {
            return Err(SceneError::Placement {
                wanted: cfg.n_buildings,
                placed: buildings.len(),
                retries: cfg.placement_retries,
            });
        }
        attempts += 1;
        let w = uniform(&mut r, cfg.building_size);
        let h = uniform(&mut r, cfg.building_size);
        let x0 = r.gen_range(0.0..cfg.extent_x - w);
        let y0 = r.gen_range(0.0..cfg.extent_y - h);
        let cand = Building {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
            height: uniform(&mut r, cfg.building_height),
        };
        if buildings
            .iter()
            .all(|b| !b.overlaps(&cand, cfg.building_gap))
        {
            buildings.push(cand);
        }
    }

    let mut r = rng::stream(seed, "scene.transmitters");
    let margin = 0.05 * cfg.extent_x.min(cfg.extent_y);
    let mut transmitters = Vec::with_capacity(cfg.n_transmitters);
    let mut attempts = 0usize;
    while transmitters.len() < cfg.n_transmitters {
        if attempts >= cfg.placement_retries {
            return Err(SceneError::Config(format!(
                "could not place {} transmitters outside buildings",
                cfg.n_transmitters
            )));
        }
        attempts += 1;
        let x = r.gen_range(margin..cfg.extent_x - margin);
        let y = r.gen_range(margin..cfg.extent_y - margin);
        let mast = uniform(&mut r, cfg.mast_height);
        if buildings.iter().any(|b| b.contains_xy(x, y)) {
            continue;
        }
        let z = terrain.elevation(x, y) + mast;
        transmitters.push(Transmitter {
            cell_id: format!("cell-{:03}", transmitters.len()),
            position: [x, y, z],
            tx_power: cfg.tx_power,
            frequency: cfg.frequency,
        });
    }

    let scene = Scene {
        extent_x: cfg.extent_x,
        extent_y: cfg.extent_y,
        terrain,
        buildings,
        transmitters,
    };
    if cfg.n_transmitters > 0 {
        scene.validate()?;
    }
    Ok(scene)
}

/// Unordered transmitter index pairs within a horizontal distance, stored as `(i, j)` with `i < j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencySet {
    pub pairs: Vec<(usize, usize)>,
    /// Transmitters that appear in no pair.
    pub unpaired: Vec<usize>,
}

impl AdjacencySet {
    pub fn contains(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.pairs.binary_search(&key).is_ok()
    }

    /// Greedy disjoint selection of up to `n` pairs, closest first.
    pub fn disjoint_pairs(&self, scene: &Scene, n: usize) -> Vec<(usize, usize)> {
        let mut sorted = self.pairs.clone();
        sorted.sort_by(|a, b| {
            let da = horizontal_distance(&scene.transmitters[a.0], &scene.transmitters[a.1]);
            let db = horizontal_distance(&scene.transmitters[b.0], &scene.transmitters[b.1]);
            da.total_cmp(&db).then(a.cmp(b))
        });
        let mut used = vec![false; scene.transmitters.len()];
        let mut out = Vec::new();
        for (i, j) in sorted {
            if out.len() == n {
                break;
            }
            if !used[i] && !used[j] {
                used[i] = true;
                used[j] = true;
                out.push((i, j));
            }
        }
        out
    }
}

pub fn horizontal_distance(a: &Transmitter, b: &Transmitter) -> f64 {
    let dx = a.position[0] - b.position[0];
    let dy = a.position[1] - b.position[1];
    dx.hypot(dy)
}

pub fn build_adjacency(scene: &Scene, max_dist: f64) -> AdjacencySet {
    let n = scene.transmitters.len();
    let mut pairs = Vec::new();
    let mut seen = vec![false; n];
    for i in 0..n {
        for j in i + 1..n {
            if horizontal_distance(&scene.transmitters[i], &scene.transmitters[j]) <= max_dist {
                pairs.push((i, j));
                seen[i] = true;
                seen[j] = true;
            }
        }
    }
    let unpaired = (0..n).filter(|&i| !seen[i]).collect();
    AdjacencySet { pairs, unpaired }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serialize a scene to the text format.
pub fn scene_to_string(scene: &Scene) -> String {
    let mut s = String::new();
    let t = &scene.terrain;
    let _ = writeln!(s, "scene {} {}", num(scene.extent_x), num(scene.extent_y));
    let _ = writeln!(s, "terrain {} {} {}", t.nx, t.ny, num(t.spacing));
    for row in t.elevations.chunks(t.nx) {
        let line: Vec<String> = row.iter().map(|&e| num(e)).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    let _ = writeln!(s, "buildings {}", scene.buildings.len());
    for b in &scene.buildings {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            num(b.x0),
            num(b.y0),
            num(b.x1),
            num(b.y1),
            num(b.height)
        );
    }
    let _ = writeln!(s, "transmitters {}", scene.transmitters.len());
    for tx in &scene.transmitters {
        let [x, y, z] = tx.position;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            tx.cell_id,
            num(x),
            num(y),
            num(z),
            num(tx.tx_power),
            num(tx.frequency)
        );
    }
    s
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    /// Next non-blank, non-comment line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            let l = l.trim();
            if !l.is_empty() && !l.starts_with('#') {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), SceneError> {
        self.next().ok_or_else(|| SceneError::Parse {
            line: 0,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_f(line: usize, field: &str, tok: Option<&str>) -> Result<f64, SceneError> {
    let tok = tok.ok_or_else(|| SceneError::Parse {
        line,
        msg: format!("missing field `{field}`"),
    })?;
    let v: f64 = tok.parse().map_err(|_| SceneError::Parse {
        line,
        msg: format!("field `{field}`: bad number `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(SceneError::Parse {
            line,
            msg: format!("field `{field}` not finite"),
        });
    }
    Ok(v)
}

fn parse_u(line: usize, field: &str, tok: Option<&str>) -> Result<usize, SceneError> {
    let tok = tok.ok_or_else(|| SceneError::Parse {
        line,
        msg: format!("missing field `{field}`"),
    })?;
    tok.parse().map_err(|_| SceneError::Parse {
        line,
        msg: format!("field `{field}`: bad integer `{tok}`"),
    })
}

fn section<'a>(
    lines: &mut Lines<'a>,
    keyword: &str,
) -> Result<(usize, std::str::SplitWhitespace<'a>), SceneError> {
    let (ln, l) = lines.expect(keyword)?;
    let mut toks = l.split_whitespace();
    if toks.next() != Some(keyword) {
        return Err(SceneError::Parse {
            line: ln,
            msg: format!("expected `{keyword}` section"),
        });
    }
    Ok((ln, toks))
}

pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (ln, mut t) = section(&mut lines, "scene")?;
    let extent_x = parse_f(ln, "extent_x", t.next())?;
    let extent_y = parse_f(ln, "extent_y", t.next())?;

    let (ln, mut t) = section(&mut lines, "terrain")?;
    let nx = parse_u(ln, "terrain.nx", t.next())?;
    let ny = parse_u(ln, "terrain.ny", t.next())?;
    let spacing = parse_f(ln, "terrain.spacing", t.next())?;
    let mut elevations = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        let (ln, l) = lines.expect("terrain row")?;
        let before = elevations.len();
        for tok in l.split_whitespace() {
            elevations.push(parse_f(ln, "elevation", Some(tok))?);
        }
        if elevations.len() - before != nx {
            return Err(SceneError::Parse {
                line: ln,
                msg: format!("terrain row {row}: expected {nx} values"),
            });
        }
    }

    let (ln, mut t) = section(&mut lines, "buildings")?;
    let nb = parse_u(ln, "buildings.count", t.next())?;
    let mut buildings = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, l) = lines.expect("building record")?;
        let mut t = l.split_whitespace();
        buildings.push(Building {
            x0: parse_f(ln, "x0", t.next())?,
            y0: parse_f(ln, "y0", t.next())?,
            x1: parse_f(ln, "x1", t.next())?,
            y1: parse_f(ln, "y1", t.next())?,
            height: parse_f(ln, "height", t.next())?,
        });
        if t.next().is_some() {
            return Err(SceneError::Parse {
                line: ln,
                msg: "trailing fields in building record".into(),
            });
        }
    }

    let (ln, mut t) = match lines.next() {
        None => return Err(SceneError::NoTransmitters),
        Some((ln, l)) => {
            let mut t = l.split_whitespace();
            if t.next() != Some("transmitters") {
                return Err(SceneError::Parse {
                    line: ln,
                    msg: "expected `transmitters` section".into(),
                });
            }
            (ln, t)
        }
    };
    let nt = parse_u(ln, "transmitters.count", t.next())?;
    if nt == 0 {
        return Err(SceneError::NoTransmitters);
    }
    let mut transmitters = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = lines.expect("transmitter record")?;
        let mut t = l.split_whitespace();
        let cell_id = t
            .next()
            .ok_or(SceneError::Parse {
                line: ln,
                msg: "missing field `cell_id`".into(),
            })?
            .to_string();
        let x = parse_f(ln, "x", t.next())?;
        let y = parse_f(ln, "y", t.next())?;
        let z = parse_f(ln, "z", t.next())?;
        let tx_power = parse_f(ln, "tx_power", t.next())?;
        let frequency = parse_f(ln, "frequency", t.next())?;
        transmitters.push(Transmitter {
            cell_id,
            position: [x, y, z],
            tx_power,
            frequency,
        });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(SceneError::Parse {
            line: ln,
            msg: "unexpected content after transmitters".into(),
        });
    }

    let scene = Scene {
        extent_x,
        extent_y,
        terrain: Terrain {
            nx,
            ny,
            spacing,
            elevations,
        },
        buildings,
        transmitters,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn ingest_scene(path: &Path) -> Result<Scene, SceneError> {
    parse_scene(&std::fs::read_to_string(path)?)
}
