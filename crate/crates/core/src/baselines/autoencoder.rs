use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::datasets::{GridSample, NormWindow, Route};
use crate::neural::layers::join;
use crate::neural::loss::point_mse;
use crate::neural::unet::{Decoder, Encoder};
use crate::neural::{
    param_checksum, sample_tensor, Adam, AdamConfig, Arch, NeuralError, Param, Parameterized,
    TensorGrid,
};
use crate::pipeline::{route_voxels, AerialPoint, PipelineError, StageReport};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Attention is always disabled for this baseline.
    pub arch: Arch,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch {
                attention: false,
                ..Arch::default()
            },
            lr: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

/// One cell: rasterized ground input and its aerial targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderSample {
    pub ground: GridSample,
    pub aerial: Vec<AerialPoint>,
}

/// Single-stream encoder/decoder without attention, trained end to end.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub arch: Arch,
    pub norm: NormWindow,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new(arch: &Arch, norm: NormWindow, seed: u64) -> Self {
        let arch = Arch {
            attention: false,
            ..arch.clone()
        };
        Self {
            encoder: Encoder::new(&arch, &mut rng::stream(seed, "autoencoder.encoder")),
            decoder: Decoder::new(&arch, &mut rng::stream(seed, "autoencoder.decoder")),
            arch,
            norm,
        }
    }

    pub fn forward(&self, ground: &GridSample) -> Result<TensorGrid, NeuralError> {
        let (enc, _) = self.encoder.forward(&sample_tensor(ground)?)?;
        Ok(self.decoder.forward(&enc)?.0)
    }

    /// Mean over cells with aerial samples of the point loss.
    pub fn loss(&self, samples: &[AutoencoderSample]) -> Result<f64, BaselineError> {
        let mut total = 0.0;
        let mut n = 0;
        for s in samples.iter().filter(|s| !s.aerial.is_empty()) {
            total += point_mse(&self.forward(&s.ground)?, &s.aerial)?.0;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }

    pub fn predict_map(&self, ground: &GridSample) -> Result<Vec<f64>, BaselineError> {
        Ok(self
            .forward(ground)?
            .data
            .iter()
            .map(|&v| self.norm.denormalize(v))
            .collect())
    }

    pub fn predict_route(
        &self,
        ground: &GridSample,
        route: &Route,
    ) -> Result<Vec<f64>, BaselineError> {
        let voxels = route_voxels(&ground.grid, route)?;
        let map = self.predict_map(ground)?;
        Ok(voxels.into_iter().map(|i| map[i]).collect())
    }
}

impl Parameterized for Autoencoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Trains the baseline on every cell's ground input against its aerial
/// samples, one optimizer step per cell.
pub fn autoencoder_baseline(
    samples: &[AutoencoderSample],
    norm: NormWindow,
    cfg: &AutoencoderConfig,
) -> Result<(Autoencoder, StageReport), BaselineError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(BaselineError::Param("autoencoder lr must be > 0".into()));
    }
    let start = Instant::now();
    let mut model = Autoencoder::new(&cfg.arch, norm, cfg.seed);
    let inputs = samples
        .iter()
        .map(|s| sample_tensor(&s.ground))
        .collect::<Result<Vec<_>, _>>()?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut report = StageReport::new("autoencoder");
    let active = samples
        .iter()
        .filter(|s| !s.aerial.is_empty())
        .count()
        .max(1) as f64;
    model.zero_grad();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (s, x) in samples.iter().zip(&inputs) {
            if s.aerial.is_empty() {
                continue;
            }
            let (enc, et) = model.encoder.forward(x)?;
            let (out, dt) = model.decoder.forward(&enc)?;
            let (l, g) = point_mse(&out, &s.aerial)?;
            epoch_loss += l;
            let (gz, gskips) = model.decoder.backward(&dt, &g, true).expect("input grad");
            model.encoder.backward(&et, &gz, &gskips)?;
            opt.step(&mut model, "");
        }
        let loss = epoch_loss / active;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged {
                stage: "autoencoder",
                epoch: epoch + 1,
                loss,
            }
            .into());
        }
        info!("autoencoder epoch {} loss {:.6}", epoch + 1, loss);
        report.losses.push(loss);
    }
    report.checksum = param_checksum(&model, &[]);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((model, report))
}
