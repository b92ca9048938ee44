use std::time::Instant;

use log::{info, warn};

use super::{PairData, PipelineError, StageReport, TrainConfig, TrainedModel};
use crate::datasets::{
    apply_mask, normalized_map, sample_mask, GridSample, MeasurementSet, NormWindow, Route,
};
use crate::grid::GridSpec;
use crate::neural::loss::{bce_logits, mse, point_mse};
use crate::neural::model::{DECODER_NAMES, DISCRIMINATOR, TARGET_ENCODER};
use crate::neural::unet::Encoded;
use crate::neural::{
    sample_tensor, Adam, AdamConfig, Arch, DualTxModel, EncoderRole, Parameterized, TensorGrid,
};
use crate::rng;

/// One aerial sample mapped to its nearest voxel, value on the normalized
/// scale (not clamped, so out-of-window readings keep their error weight).
pub type AerialPoint = (usize, f64);

pub fn aerial_points(ms: &MeasurementSet, grid: &GridSpec, norm: &NormWindow) -> Vec<AerialPoint> {
    ms.items
        .iter()
        .filter_map(|m| {
            grid.locate_index(m.position)
                .map(|i| (i, norm.scale(m.rsrp)))
        })
        .collect()
}

fn adam(cfg: &TrainConfig, lr: f64) -> Adam {
    Adam::new(AdamConfig {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..Default::default()
    })
}

/// Masked source-map input for `(epoch, pair, stream)`.
pub fn pretrain_sample(
    pair: &PairData,
    pair_idx: usize,
    stream: usize,
    epoch: usize,
    cfg: &TrainConfig,
    norm: &NormWindow,
) -> Result<GridSample, PipelineError> {
    let seed = rng::derive_seed_idx(
        cfg.seed,
        "pretrain.mask",
        &[epoch as u64, pair_idx as u64, stream as u64],
    );
    let mask = sample_mask(&pair.grid, pair.tx_positions[stream], &cfg.mask, seed)?;
    Ok(apply_mask(&pair.source_maps[stream], &mask, norm)?)
}

/// Masked source draws kept aside for scoring the discriminator.
pub fn source_holdout(
    pairs: &[PairData],
    cfg: &TrainConfig,
    norm: &NormWindow,
) -> Result<Vec<GridSample>, PipelineError> {
    let mut out = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        for s in 0..2 {
            for k in 0..cfg.holdout_draws {
                let seed = rng::derive_seed_idx(
                    cfg.seed,
                    "adapt.holdout",
                    &[p as u64, s as u64, k as u64],
                );
                let mask = sample_mask(&pair.grid, pair.tx_positions[s], &cfg.mask, seed)?;
                out.push(apply_mask(&pair.source_maps[s], &mask, norm)?);
            }
        }
    }
    Ok(out)
}

/// Two-stream reconstruction loss: sum over streams of the per-voxel mean
/// squared error against the full normalized maps.
pub fn pretrain_loss(
    model: &DualTxModel,
    cfg: &TrainConfig,
    inputs: [&GridSample; 2],
    targets: [&[f64]; 2],
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for s in 0..2 {
        let out = model.decode(
            cfg.decoder_for(s),
            &model.encode(EncoderRole::Source, inputs[s])?,
        )?;
        total += mse(&out, targets[s])?.0;
    }
    Ok(total)
}

/// Discriminator objective: source features labelled 1, target 0.
pub fn disc_loss(model: &DualTxModel, z_source: &TensorGrid, z_target: &TensorGrid) -> f64 {
    let (ls, _) = model.discriminator.logits(z_source);
    let (lt, _) = model.discriminator.logits(z_target);
    bce_logits(&ls, &vec![1.0; ls.len()]).0 + bce_logits(&lt, &vec![0.0; lt.len()]).0
}

/// Target-encoder objective: target features labelled as source.
pub fn encoder_loss(model: &DualTxModel, z_target: &TensorGrid) -> f64 {
    let (lt, _) = model.discriminator.logits(z_target);
    bce_logits(&lt, &vec![1.0; lt.len()]).0
}

/// Two-stream point loss at aerial voxels with the target encoder frozen.
/// Streams without aerial samples contribute nothing.
pub fn finetune_loss(
    model: &DualTxModel,
    cfg: &TrainConfig,
    ground: [&GridSample; 2],
    aerial: [&[AerialPoint]; 2],
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for s in 0..2 {
        if aerial[s].is_empty() {
            continue;
        }
        let out = model.decode(
            cfg.decoder_for(s),
            &model.encode(EncoderRole::Target, ground[s])?,
        )?;
        total += point_mse(&out, aerial[s])?.0;
    }
    Ok(total)
}

fn finite(stage: &'static str, epoch: usize, loss: f64) -> Result<(), PipelineError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::Diverged { stage, epoch, loss })
    }
}

fn scaled(mut g: TensorGrid, k: f64) -> TensorGrid {
    g.data.iter_mut().for_each(|v| *v *= k);
    g
}

/// Masked-reconstruction pretraining of the source encoder and both decoders.
pub fn pretrain(
    model: &mut DualTxModel,
    pairs: &[PairData],
    cfg: &TrainConfig,
) -> Result<StageReport, PipelineError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(PipelineError::Config(
            "pretraining needs at least one transmitter pair".into(),
        ));
    }
    let start = Instant::now();
    let norm = model.norm;
    let targets: Vec<[Vec<f64>; 2]> = pairs
        .iter()
        .map(|p| {
            [
                normalized_map(&p.source_maps[0], &norm),
                normalized_map(&p.source_maps[1], &norm),
            ]
        })
        .collect();
    let mut opt = adam(cfg, cfg.pretrain_lr);
    let mut report = StageReport::new("pretrain");
    let mut initial = None;
    let mut above = 0;
    model.zero_grad();
    for epoch in 0..cfg.pretrain_epochs {
        let mut epoch_loss = 0.0;
        for (b0, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let k = 1.0 / chunk.len() as f64;
            for (off, pair) in chunk.iter().enumerate() {
                let p = b0 * cfg.batch_size + off;
                for (s, target) in targets[p].iter().enumerate() {
                    let x = sample_tensor(&pretrain_sample(pair, p, s, epoch, cfg, &norm)?)?;
                    let d = cfg.decoder_for(s);
                    let (enc, et) = model.source_encoder.forward(&x)?;
                    let (out, dt) = model.decoders[d].forward(&enc)?;
                    let (l, g) = mse(&out, target)?;
                    epoch_loss += l;
                    let (gz, gskips) = model.decoders[d]
                        .backward(&dt, &scaled(g, k), true)
                        .expect("input grad");
                    model.source_encoder.backward(&et, &gz, &gskips)?;
                }
            }
            opt.step(&mut model.source_encoder, "source_encoder");
            for (dec, name) in model.decoders.iter_mut().zip(DECODER_NAMES) {
                opt.step(dec, name);
            }
        }
        let loss = epoch_loss / pairs.len() as f64;
        finite("pretrain", epoch + 1, loss)?;
        let init = *initial.get_or_insert(loss);
        above = if loss > 10.0 * init { above + 1 } else { 0 };
        if above >= 3 {
            return Err(PipelineError::Diverged {
                stage: "pretrain",
                epoch: epoch + 1,
                loss,
            });
        }
        info!("pretrain epoch {} loss {:.6}", epoch + 1, loss);
        report.losses.push(loss);
    }
    report.checksum = model.checksum(&[]);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn encode_all(
    model: &DualTxModel,
    role: EncoderRole,
    xs: &[GridSample],
) -> Result<TensorGrid, PipelineError> {
    let zs = xs
        .iter()
        .map(|x| model.encode(role, x).map(|e| e.z))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TensorGrid::stack(&zs)?)
}

/// Class-balanced share of correctly attributed samples (source ↦ p > 0.5).
pub fn disc_accuracy(model: &DualTxModel, z_source: &TensorGrid, z_target: &TensorGrid) -> f64 {
    let ps = model.discriminator.probability(z_source);
    let pt = model.discriminator.probability(z_target);
    let hs = ps.iter().filter(|p| **p > 0.5).count() as f64 / ps.len().max(1) as f64;
    let ht = pt.iter().filter(|p| **p < 0.5).count() as f64 / pt.len().max(1) as f64;
    0.5 * (hs + ht)
}

fn holdout_accuracy(
    model: &DualTxModel,
    source: &[GridSample],
    pairs: &[PairData],
) -> Result<f64, PipelineError> {
    let target: Vec<GridSample> = pairs
        .iter()
        .flat_map(|p| {
            let held: Vec<GridSample> = p.holdout_ground.iter().flatten().cloned().collect();
            if held.is_empty() {
                p.ground_grid.to_vec()
            } else {
                held
            }
        })
        .collect();
    let zs = encode_all(model, EncoderRole::Source, source)?;
    let zt = encode_all(model, EncoderRole::Target, &target)?;
    Ok(disc_accuracy(model, &zs, &zt))
}

/// Masked source draws per cell in the discriminator warm-up pool.
const WARMUP_DRAWS: u64 = 4;

/// One discriminator update; returns the loss before the step.
fn disc_step(model: &mut DualTxModel, opt: &mut Adam, zs: &TensorGrid, zt: &TensorGrid) -> f64 {
    let (ls, ts) = model.discriminator.logits(zs);
    let (lt, tt) = model.discriminator.logits(zt);
    let (l1, g1) = bce_logits(&ls, &vec![1.0; ls.len()]);
    let (l0, g0) = bce_logits(&lt, &vec![0.0; lt.len()]);
    model.discriminator.backward(&ts, &g1);
    model.discriminator.backward(&tt, &g0);
    opt.step(&mut model.discriminator, DISCRIMINATOR);
    l1 + l0
}

/// Adversarial alignment of the target encoder to the source feature
/// distribution. Source encoder and decoders stay untouched.
pub fn adapt(
    model: &mut DualTxModel,
    pairs: &[PairData],
    cfg: &TrainConfig,
) -> Result<StageReport, PipelineError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(PipelineError::Config(
            "alignment needs at least one transmitter pair".into(),
        ));
    }
    let start = Instant::now();
    let norm = model.norm;
    model.sync_target();
    model.zero_grad();
    let holdout = source_holdout(pairs, cfg, &norm)?;
    let mut d_opt = adam(cfg, cfg.adda_lr);
    let mut e_opt = adam(cfg, cfg.adda_lr);
    let mut report = StageReport::new("adapt");
    let mut low_streak = 0;
    if cfg.disc_warmup_steps > 0 {
        let mut src = Vec::new();
        for (p, pair) in pairs.iter().enumerate() {
            for s in 0..2 {
                for k in 0..WARMUP_DRAWS {
                    let seed =
                        rng::derive_seed_idx(cfg.seed, "adapt.warmup", &[p as u64, s as u64, k]);
                    let mask = sample_mask(&pair.grid, pair.tx_positions[s], &cfg.mask, seed)?;
                    src.push(apply_mask(&pair.source_maps[s], &mask, &norm)?);
                }
            }
        }
        let ground: Vec<GridSample> = pairs
            .iter()
            .flat_map(|p| p.ground_grid.iter().cloned())
            .collect();
        let zs = encode_all(model, EncoderRole::Source, &src)?;
        let zt = encode_all(model, EncoderRole::Target, &ground)?;
        for _ in 0..cfg.disc_warmup_steps {
            disc_step(model, &mut d_opt, &zs, &zt);
        }
    }
    if cfg.disc_warmup_epochs == 0 {
        report.holdout_before = Some(holdout_accuracy(model, &holdout, pairs)?);
    }
    for epoch in 0..cfg.adda_epochs {
        let train_encoder = epoch >= cfg.disc_warmup_epochs;
        let (mut ld_sum, mut le_sum, mut acc_sum) = (0.0, 0.0, 0.0);
        for (p, pair) in pairs.iter().enumerate() {
            let mut src = Vec::with_capacity(2);
            for s in 0..2 {
                let seed = rng::derive_seed_idx(
                    cfg.seed,
                    "adapt.mask",
                    &[epoch as u64, p as u64, s as u64],
                );
                let mask = sample_mask(&pair.grid, pair.tx_positions[s], &cfg.mask, seed)?;
                src.push(apply_mask(&pair.source_maps[s], &mask, &norm)?);
            }
            let zs = encode_all(model, EncoderRole::Source, &src)?;
            let mut traces = Vec::with_capacity(2);
            let mut zt = Vec::with_capacity(2);
            for x in &pair.ground_grid {
                let (enc, tr) = model.target_encoder.forward(&sample_tensor(x)?)?;
                zt.push(enc);
                traces.push(tr);
            }
            let zt_all = TensorGrid::stack(&zt.iter().map(|e| e.z.clone()).collect::<Vec<_>>())?;
            acc_sum += disc_accuracy(model, &zs, &zt_all);

            ld_sum += disc_step(model, &mut d_opt, &zs, &zt_all);

            // target-encoder step against the updated discriminator
            if train_encoder {
                let (lt, tt) = model.discriminator.logits(&zt_all);
                let (le, ge) = bce_logits(&lt, &vec![1.0; lt.len()]);
                le_sum += le;
                let gz = model.discriminator.backward(&tt, &ge);
                model.discriminator.zero_grad();
                for (b, (enc, tr)) in zt.iter().zip(&traces).enumerate() {
                    let zeros: Vec<TensorGrid> = enc
                        .skips
                        .iter()
                        .map(|s| TensorGrid::zeros(s.shape))
                        .collect();
                    model.target_encoder.backward(tr, &gz.select(b), &zeros)?;
                }
                e_opt.step(&mut model.target_encoder, TARGET_ENCODER);
            }
        }
        let n = pairs.len() as f64;
        let ld = ld_sum / n;
        finite("adapt", epoch + 1, ld)?;
        report.losses.push(ld);
        report.disc_accuracy.push(acc_sum / n);
        low_streak = if ld < 1e-3 { low_streak + 1 } else { 0 };
        if low_streak >= 5 {
            d_opt.cfg.lr *= 0.5;
            low_streak = 0;
            let msg = format!(
                "epoch {}: discriminator loss below 1e-3 for 5 epochs, lr halved to {:e}",
                epoch + 1,
                d_opt.cfg.lr
            );
            warn!("{msg}");
            report.notes.push(msg);
        }
        info!(
            "adapt epoch {} L_D {:.6} L_enc {:.6} acc {:.3}",
            epoch + 1,
            ld,
            le_sum / n,
            acc_sum / n
        );
        if epoch + 1 == cfg.disc_warmup_epochs {
            report.holdout_before = Some(holdout_accuracy(model, &holdout, pairs)?);
        }
    }
    report.holdout_after = Some(holdout_accuracy(model, &holdout, pairs)?);
    if report.holdout_before.is_none() {
        report.holdout_before = report.holdout_after;
    }
    report.checksum = model.checksum(&[]);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Decoder-only calibration on aerial samples; the target encoder is frozen
/// and its features are computed once.
pub fn finetune(
    model: &mut DualTxModel,
    pairs: &[PairData],
    cfg: &TrainConfig,
) -> Result<StageReport, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let norm = model.norm;
    let mut report = StageReport::new("finetune");
    let mut cached: Vec<[Encoded; 2]> = Vec::with_capacity(pairs.len());
    let mut points: Vec<[Vec<AerialPoint>; 2]> = Vec::with_capacity(pairs.len());
    for (p, pair) in pairs.iter().enumerate() {
        let e0 = model.encode(EncoderRole::Target, &pair.ground_grid[0])?;
        let e1 = model.encode(EncoderRole::Target, &pair.ground_grid[1])?;
        cached.push([e0, e1]);
        let pts = [0, 1].map(|s| aerial_points(&pair.aerial[s], &pair.grid, &norm));
        for (s, pt) in pts.iter().enumerate() {
            if pt.is_empty() {
                let msg = format!(
                    "pair {p} stream {s} ({}) has no aerial samples; term skipped",
                    pair.cells[s]
                );
                warn!("{msg}");
                report.notes.push(msg);
            }
        }
        points.push(pts);
    }
    let mut opt = adam(cfg, cfg.finetune_lr);
    model.zero_grad();
    for epoch in 0..cfg.finetune_epochs {
        let mut epoch_loss = 0.0;
        for (b0, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let k = 1.0 / chunk.len() as f64;
            for off in 0..chunk.len() {
                let p = b0 * cfg.batch_size + off;
                for s in 0..2 {
                    if points[p][s].is_empty() {
                        continue;
                    }
                    let d = cfg.decoder_for(s);
                    let (out, dt) = model.decoders[d].forward(&cached[p][s])?;
                    let (l, g) = point_mse(&out, &points[p][s])?;
                    epoch_loss += l;
                    model.decoders[d].backward(&dt, &scaled(g, k), false);
                }
            }
            for (dec, name) in model.decoders.iter_mut().zip(DECODER_NAMES) {
                opt.step(dec, name);
            }
        }
        let loss = epoch_loss / pairs.len().max(1) as f64;
        finite("finetune", epoch + 1, loss)?;
        info!("finetune epoch {} loss {:.6}", epoch + 1, loss);
        report.losses.push(loss);
    }
    report.checksum = model.checksum(&[]);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs the enabled stages from a fresh model. Without alignment the target
/// encoder is a copy of the (possibly pretrained) source encoder.
pub fn run(
    arch: &Arch,
    norm: NormWindow,
    pairs: &[PairData],
    cfg: &TrainConfig,
) -> Result<TrainedModel, PipelineError> {
    cfg.validate()?;
    let mut model = DualTxModel::new(arch.clone(), norm, rng::derive_seed(cfg.seed, "model"));
    let mut reports = Vec::new();
    if cfg.pretrain {
        reports.push(pretrain(&mut model, pairs, cfg)?);
    }
    if cfg.adda {
        reports.push(adapt(&mut model, pairs, cfg)?);
    } else {
        model.sync_target();
    }
    if cfg.finetune {
        reports.push(finetune(&mut model, pairs, cfg)?);
    }
    Ok(TrainedModel { model, reports })
}

/// Full predicted map in dBm from the rasterized ground observations.
pub fn predict_map(
    model: &DualTxModel,
    ground: &GridSample,
    decoder: usize,
) -> Result<Vec<f64>, PipelineError> {
    Ok(model.predict_dbm(EncoderRole::Target, decoder, ground)?)
}

/// Voxel index of every route sample point; errors with the indices of
/// waypoints outside the grid.
pub fn route_voxels(grid: &GridSpec, route: &Route) -> Result<Vec<usize>, PipelineError> {
    let outside: Vec<usize> = route
        .waypoints
        .iter()
        .enumerate()
        .filter(|(_, w)| grid.locate(**w).is_none())
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return Err(PipelineError::RouteOutside(outside));
    }
    route
        .sample_points()
        .into_iter()
        .map(|(p, _)| {
            grid.locate_index(p)
                .ok_or_else(|| PipelineError::RouteOutside(vec![]))
        })
        .collect()
}

/// RSRP profile (dBm) at the route's sample points, nearest voxel.
pub fn predict_route(
    model: &DualTxModel,
    ground: &GridSample,
    route: &Route,
    decoder: usize,
) -> Result<Vec<f64>, PipelineError> {
    let voxels = route_voxels(&ground.grid, route)?;
    let map = predict_map(model, ground, decoder)?;
    Ok(voxels.into_iter().map(|i| map[i]).collect())
}
