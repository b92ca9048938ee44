use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, EvalError, RouteReport};
use crate::datasets::NormWindow;
use crate::neural::{Arch, DualTxModel};
use crate::pipeline::{adapt, finetune, pretrain, PairData, StageReport, TrainConfig};
use crate::rng;

/// Fields an ablation row may change.
const TOGGLES: [&str; 4] = ["pretrain", "adda", "finetune", "dual_cell"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationRow {
    pub pretrain: bool,
    pub adda: bool,
    pub finetune: bool,
    pub dual_cell: bool,
}

impl AblationRow {
    pub const FULL: Self = Self {
        pretrain: true,
        adda: true,
        finetune: true,
        dual_cell: true,
    };

    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            pretrain: cfg.pretrain,
            adda: cfg.adda,
            finetune: cfg.finetune,
            dual_cell: cfg.dual_cell,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            pretrain: self.pretrain,
            adda: self.adda,
            finetune: self.finetune,
            dual_cell: self.dual_cell,
            ..base.clone()
        }
    }

    /// e.g. `pretrain=1 adda=0 finetune=1 dual_cell=1`
    pub fn label(&self) -> String {
        let b = |v: bool| if v { 1 } else { 0 };
        format!(
            "pretrain={} adda={} finetune={} dual_cell={}",
            b(self.pretrain),
            b(self.adda),
            b(self.finetune),
            b(self.dual_cell)
        )
    }
}

/// The six stage-toggle configurations, full model first.
pub fn ablation_rows() -> Vec<AblationRow> {
    let r = |pretrain, adda, finetune, dual_cell| AblationRow {
        pretrain,
        adda,
        finetune,
        dual_cell,
    };
    vec![
        r(true, true, true, true),
        r(true, false, true, true),
        r(true, true, false, true),
        r(true, true, true, false),
        r(false, false, true, true),
        r(true, false, false, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<RouteReport>,
    /// Per row, the config fields that differ from the full-model row.
    pub config_diff: Vec<Vec<String>>,
    #[serde(skip)]
    pub stages: Vec<Vec<StageReport>>,
}

impl AblationTable {
    pub fn full(&self) -> &RouteReport {
        let i = self
            .rows
            .iter()
            .position(|r| *r == AblationRow::FULL)
            .expect("validated");
        &self.reports[i]
    }

    pub fn report(&self, row: &AblationRow) -> Option<&RouteReport> {
        self.rows
            .iter()
            .position(|r| r == row)
            .map(|i| &self.reports[i])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ablation seed {}\n", self.seed);
        for ((row, rep), diff) in self.rows.iter().zip(&self.reports).zip(&self.config_diff) {
            s.push_str(&format!(
                "row {} seed {} best {:.6} mean {:.6} worst {:.6} diff [{}]\n",
                row.label(),
                self.seed,
                rep.best,
                rep.mean,
                rep.worst,
                diff.join(",")
            ));
        }
        s
    }
}

fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (va, vb) = (
        serde_json::to_value(a).expect("config"),
        serde_json::to_value(b).expect("config"),
    );
    let (oa, ob) = (
        va.as_object().expect("object"),
        vb.as_object().expect("object"),
    );
    oa.iter()
        .filter(|(k, v)| ob.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Checks the harness contract: the full-model row exactly once, every
/// standard row present, and rows differing only in stage toggles.
fn validate(rows: &[TrainConfig]) -> Result<(usize, Vec<Vec<String>>), EvalError> {
    let kinds: Vec<AblationRow> = rows.iter().map(AblationRow::of).collect();
    let full: Vec<usize> = (0..rows.len())
        .filter(|&i| kinds[i] == AblationRow::FULL)
        .collect();
    if full.len() != 1 {
        return Err(EvalError::Rows(format!(
            "the full-model row must appear exactly once, found {}",
            full.len()
        )));
    }
    for want in ablation_rows() {
        if !kinds.contains(&want) {
            return Err(EvalError::Rows(format!("missing row {}", want.label())));
        }
    }
    let reference = &rows[full[0]];
    let mut diffs = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let d = config_diff(reference, r);
        if let Some(bad) = d.iter().find(|k| !TOGGLES.contains(&k.as_str())) {
            return Err(EvalError::Rows(format!(
                "row {i} differs from the full-model row in `{bad}`"
            )));
        }
        diffs.push(d);
    }
    Ok((full[0], diffs))
}

/// Trains and scores every row on the same benchmark and seed. Stage
/// prefixes shared between rows (same toggles up to that stage) are trained
/// once; each row's model is identical to `pipeline::run` with its config.
pub fn ablation_suite(
    arch: &Arch,
    norm: NormWindow,
    pairs: &[PairData],
    rows: &[TrainConfig],
) -> Result<AblationTable, EvalError> {
    let (full, config_diff) = validate(rows)?;
    for r in rows {
        r.validate()?;
    }
    let seed = rows[full].seed;
    type Cached = (DualTxModel, Vec<StageReport>);
    let mut after_pretrain: BTreeMap<(bool, bool), Cached> = BTreeMap::new();
    let mut after_adapt: BTreeMap<(bool, bool, bool), Cached> = BTreeMap::new();
    let mut table = AblationTable {
        seed,
        rows: Vec::new(),
        reports: Vec::new(),
        config_diff,
        stages: Vec::new(),
    };
    for cfg in rows {
        let row = AblationRow::of(cfg);
        let k1 = (row.pretrain, row.dual_cell);
        if let Entry::Vacant(slot) = after_pretrain.entry(k1) {
            let mut model =
                DualTxModel::new(arch.clone(), norm, rng::derive_seed(cfg.seed, "model"));
            let mut reports = Vec::new();
            if row.pretrain {
                reports.push(pretrain(&mut model, pairs, cfg)?);
            }
            slot.insert((model, reports));
        }
        let k2 = (row.pretrain, row.adda, row.dual_cell);
        if let Entry::Vacant(slot) = after_adapt.entry(k2) {
            let (mut model, mut reports) = after_pretrain[&k1].clone();
            if row.adda {
                reports.push(adapt(&mut model, pairs, cfg)?);
            } else {
                model.sync_target();
            }
            slot.insert((model, reports));
        }
        let (mut model, mut reports) = after_adapt[&k2].clone();
        if row.finetune {
            reports.push(finetune(&mut model, pairs, cfg)?);
        }
        table
            .reports
            .push(evaluate_model(&row.label(), &model, pairs, cfg)?);
        table.rows.push(row);
        table.stages.push(reports);
    }
    Ok(table)
}
