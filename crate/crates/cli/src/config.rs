//! Flat `key = value` run configuration. Keys are dotted paths under the
//! sections `seed`, `scene.`, `prop.`, `data.`, `mask.`, `model.`, `norm.`,
//! `train.` and `eval.`; values are JSON literals (bare words are strings).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use skymap_core::datasets::NormWindow;
use skymap_core::eval::BaselineSuiteConfig;
use skymap_core::neural::Arch;
use skymap_core::pipeline::{BenchmarkConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub baselines: BaselineSuiteConfig,
    /// Altitude level of the emitted map slices.
    pub slice_level: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            baselines: BaselineSuiteConfig::default(),
            slice_level: 10,
        }
    }
}

/// Everything a run depends on. Seeds of the training and baseline stages
/// and the autoencoder architecture are derived from `seed` and `model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub bench: BenchmarkConfig,
    pub norm: NormWindow,
    pub model: Arch,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            bench: BenchmarkConfig::default(),
            norm: NormWindow::default(),
            model: Arch::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        c.resolve();
        c
    }
}

/// Internal path prefix → external key prefix, most specific first.
const SECTIONS: [(&str, &str); 5] = [
    ("bench.scene.", "scene."),
    ("bench.source.", "prop."),
    ("bench.", "data."),
    ("train.mask.", "mask."),
    ("", ""),
];

/// Internal paths fixed by `resolve` rather than by the file.
const DERIVED: [&str; 4] = [
    "train.seed",
    "eval.baselines.gp.seed",
    "eval.baselines.autoencoder.seed",
    "eval.baselines.autoencoder.arch.",
];

fn external(path: &str) -> Option<String> {
    if DERIVED
        .iter()
        .any(|d| path == *d || (d.ends_with('.') && path.starts_with(d)))
    {
        return None;
    }
    SECTIONS
        .iter()
        .find(|(i, _)| path.starts_with(i))
        .map(|(i, e)| format!("{e}{}", &path[i.len()..]))
}

fn internal(key: &str) -> String {
    for (i, e) in SECTIONS {
        if !e.is_empty() && key.starts_with(e) {
            return format!("{i}{}", &key[e.len()..]);
        }
    }
    key.to_string()
}

fn flatten(v: &Value, path: String, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                flatten(x, p, out);
            }
        }
        leaf => {
            out.insert(path, leaf.clone());
        }
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    for part in path.split('.') {
        cur = cur
            .get_mut(part)
            .expect("path checked against the flat view");
    }
    *cur = v;
}

impl RunConfig {
    /// Re-derives the fields that follow from `seed` and `model`.
    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
        self.eval.baselines.gp.seed = self.seed;
        self.eval.baselines.autoencoder.seed = self.seed;
        self.eval.baselines.autoencoder.arch = Arch {
            attention: false,
            ..self.model.clone()
        };
    }

    /// Every settable key with its value, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut all = BTreeMap::new();
        flatten(
            &serde_json::to_value(self).expect("config serializes"),
            String::new(),
            &mut all,
        );
        all.into_iter()
            .filter_map(|(p, v)| external(&p).map(|k| (k, v)))
            .collect()
    }

    /// Canonical text form: one `key = value` line per key.
    pub fn to_text(&self) -> String {
        self.to_flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            cfg.set(key.trim(), val.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, text: &str) -> Result<(), CliError> {
        if !self.to_flat().contains_key(key) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        let value = serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()));
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        set_path(&mut root, &internal(key), value);
        let mut next: Self = serde_json::from_value(root)
            .map_err(|e| CliError::Config(format!("`{key}` = `{text}`: {e}")))?;
        next.resolve();
        *self = next;
        Ok(())
    }

    /// Field-level checks of every section. Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CliError> {
        let err =
            |section: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{section}: {e}"));
        self.bench.source.validate().map_err(|e| err("prop", &e))?;
        self.train.validate().map_err(|e| err("train", &e))?;
        self.bench
            .ground_bands
            .validate()
            .map_err(|e| err("data.ground_bands", &e))?;
        if !(self.norm.hi > self.norm.lo) {
            return Err(CliError::Config("norm: hi must exceed lo".into()));
        }
        if self.model.base_channels == 0 || self.model.depth == 0 {
            return Err(CliError::Config(
                "model: base_channels and depth must be >= 1".into(),
            ));
        }
        let div = 1usize << self.model.depth;
        if self.bench.crop.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(CliError::Config(format!(
                "data.crop: every dimension must be a positive multiple of {div}"
            )));
        }
        let top = self.bench.crop[2] as f64 * self.bench.cell_size;
        if !(self.bench.altitude_band.1 < top) {
            return Err(CliError::Config(format!(
                "data.altitude_band: upper altitude {} must lie below the crop top {top} m",
                self.bench.altitude_band.1
            )));
        }
        if self.eval.slice_level >= self.bench.crop[2] {
            return Err(CliError::Config(format!(
                "eval.slice_level: {} outside [0, {})",
                self.eval.slice_level, self.bench.crop[2]
            )));
        }
        Ok(())
    }
}
