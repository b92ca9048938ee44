//! Three-stage training (masked pretraining, adversarial alignment,
//! decoder-only finetuning) and route-level inference.

pub mod benchmark;
mod stages;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DataError, GridSample, MaskParams, MeasurementSet, Route};
use crate::geoscene::SceneError;
use crate::grid::GridSpec;
use crate::neural::{DualTxModel, NeuralError};
use crate::propsim::{PropError, RadioMap};

pub use benchmark::{
    assemble_pair, build_benchmark, pair_records, select_scene, simulate_pair, Benchmark,
    BenchmarkConfig, PairMaps, PairRecords,
};
pub use stages::{
    adapt, aerial_points, disc_accuracy, disc_loss, encoder_loss, finetune, finetune_loss,
    predict_map, predict_route, pretrain, pretrain_loss, pretrain_sample, route_voxels, run,
    source_holdout, AerialPoint,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} diverged at epoch {epoch}: loss {loss} exceeds 10x the initial loss")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },
    #[error("route waypoints outside the grid: {0:?}")]
    RouteOutside(Vec<usize>),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Stage toggles and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain: bool,
    pub adda: bool,
    pub finetune: bool,
    /// Separate decoders per transmitter of a pair; otherwise both cells share decoder i.
    pub dual_cell: bool,
    pub pretrain_lr: f64,
    pub adda_lr: f64,
    pub finetune_lr: f64,
    pub pretrain_epochs: usize,
    pub adda_epochs: usize,
    /// Leading ADDA epochs that train only the discriminator.
    pub disc_warmup_epochs: usize,
    /// Discriminator-only steps on cached features before the first epoch.
    pub disc_warmup_steps: usize,
    pub finetune_epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskParams,
    pub beta1: f64,
    pub beta2: f64,
    /// Masked source draws per cell used for held-out discriminator accuracy.
    pub holdout_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: true,
            adda: true,
            finetune: true,
            dual_cell: true,
            pretrain_lr: 1e-3,
            adda_lr: 1e-4,
            finetune_lr: 1e-4,
            pretrain_epochs: 50,
            adda_epochs: 30,
            disc_warmup_epochs: 5,
            disc_warmup_steps: 2000,
            finetune_epochs: 50,
            batch_size: 1,
            seed: 0,
            mask: MaskParams::default(),
            beta1: 0.9,
            beta2: 0.999,
            holdout_draws: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("adda_lr", self.adda_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2 must lie in [0, 1)".into());
        }
        if self.disc_warmup_epochs > self.adda_epochs {
            return bad("disc_warmup_epochs exceeds adda_epochs".into());
        }
        self.mask.validate()?;
        Ok(())
    }

    /// Decoder serving `stream` under the dual-cell toggle.
    pub fn decoder_for(&self, stream: usize) -> usize {
        if self.dual_cell {
            stream
        } else {
            0
        }
    }
}

/// Per-stage training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub losses: Vec<f64>,
    /// Discriminator accuracy on each epoch's training batches (alignment only).
    pub disc_accuracy: Vec<f64>,
    /// Held-out discriminator accuracy after warm-up and at the end (alignment only).
    pub holdout_before: Option<f64>,
    pub holdout_after: Option<f64>,
    pub checksum: String,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl StageReport {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ..Default::default()
        }
    }

    /// One record per epoch plus summary lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("stage {}\n", self.stage);
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("epoch {} loss {:.17e}", i + 1, l));
            if let Some(a) = self.disc_accuracy.get(i) {
                s.push_str(&format!(" disc_acc {a:.6}"));
            }
            s.push('\n');
        }
        if let Some(a) = self.holdout_before {
            s.push_str(&format!("holdout_before {a:.6}\n"));
        }
        if let Some(a) = self.holdout_after {
            s.push_str(&format!("holdout_after {a:.6}\n"));
        }
        for n in &self.notes {
            s.push_str(&format!("note {n}\n"));
        }
        s.push_str(&format!("checksum {}\n", self.checksum));
        s
    }
}

/// Training and evaluation material for one adjacent transmitter pair,
/// all on the pair's crop grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub cells: [String; 2],
    pub tx_positions: [[f64; 3]; 2],
    pub grid: GridSpec,
    /// Simulated maps under the source propagation parameters.
    pub source_maps: [RadioMap; 2],
    /// Maps under the shifted parameters; route ground truth.
    pub target_maps: [RadioMap; 2],
    pub ground: [MeasurementSet; 2],
    /// Rasterized ground measurements: the network input on the target domain.
    pub ground_grid: [GridSample; 2],
    /// Independent ground draws used only to score the discriminator.
    pub holdout_ground: [Vec<GridSample>; 2],
    pub aerial: [MeasurementSet; 2],
    pub eval_routes: Vec<Route>,
}

/// Trained model plus the reports of the stages that ran.
pub struct TrainedModel {
    pub model: DualTxModel,
    pub reports: Vec<StageReport>,
}
