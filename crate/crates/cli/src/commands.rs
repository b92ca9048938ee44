use std::path::Path;

use log::info;
use skymap_core::datasets::{
    load_measurements, measurements_to_csv, Domain, MeasurementSet, Route,
};
use skymap_core::eval::{
    ablation_rows, ablation_suite, evaluate_autoencoder, evaluate_gp, evaluate_kriging,
    evaluate_model, profile_csv, route_rmse, slice_csv, Comparison, RouteReport,
};
use skymap_core::geoscene::{ingest_scene, scene_to_string, Scene};
use skymap_core::neural::DualTxModel;
use skymap_core::pipeline::{
    adapt, assemble_pair, finetune, pair_records, predict_map, predict_route, pretrain,
    route_voxels, select_scene, simulate_pair, PairData, PairMaps, PairRecords, StageReport,
};
use skymap_core::propsim::{load_radio_map, write_radio_map, RadioMap};
use skymap_core::rng;

use crate::config::RunConfig;
use crate::manifest::{DirLock, RunManifest, StageStatus};
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    GenScene,
    Simulate,
    MakeDataset,
    Pretrain,
    Adapt,
    Finetune,
    Baseline,
    Evaluate,
    Ablate,
    PredictRoute {
        pair: usize,
        tx: usize,
        route: usize,
    },
    EmitFigures,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScene => "gen-scene",
            Command::Simulate => "simulate",
            Command::MakeDataset => "make-dataset",
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Finetune => "finetune",
            Command::Baseline => "baseline",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::PredictRoute { .. } => "predict-route",
            Command::EmitFigures => "emit-figures",
        }
    }
}

const SCENE: &str = "scene.txt";
const BASELINES: &str = "baseline.json";

fn map_path(p: usize, s: usize, kind: &str) -> String {
    format!("maps/pair{p}_tx{s}_{kind}.rmap")
}

fn data_path(p: usize, s: usize, kind: &str) -> String {
    format!("data/pair{p}_tx{s}_{kind}.csv")
}

fn routes_path(p: usize) -> String {
    format!("data/pair{p}_routes.json")
}

fn ckpt(stage: &str) -> String {
    format!("{stage}.ckpt")
}

fn report(stage: &str) -> String {
    format!("{stage}.report")
}

/// State shared by one command invocation.
struct Run<'a> {
    dir: &'a Path,
    cfg: RunConfig,
    manifest: RunManifest,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn require(&self, rel: &str, producer: &'static str) -> Result<(), CliError> {
        if !self.manifest.stages.contains_key(producer) || !self.dir.join(rel).exists() {
            return Err(CliError::Missing {
                artifact: rel.to_string(),
                producer,
            });
        }
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn scene(&self) -> Result<(Scene, Vec<(usize, usize)>), CliError> {
        self.require(SCENE, "gen-scene")?;
        let scene = ingest_scene(&self.dir.join(SCENE))?;
        let pairs = self.cfg.bench.pairs_of(&scene);
        if pairs.len() != self.cfg.bench.n_pairs {
            return Err(CliError::Format(format!(
                "{SCENE} yields {} transmitter pairs, expected {}",
                pairs.len(),
                self.cfg.bench.n_pairs
            )));
        }
        Ok((scene, pairs))
    }

    fn maps(&self, p: usize) -> Result<PairMaps, CliError> {
        let load = |s: usize, kind: &str| -> Result<RadioMap, CliError> {
            let rel = map_path(p, s, kind);
            self.require(&rel, "simulate")?;
            Ok(load_radio_map(&self.dir.join(rel))?)
        };
        Ok(PairMaps {
            source: [load(0, "source")?, load(1, "source")?],
            target: [load(0, "target")?, load(1, "target")?],
            layer: [load(0, "layer")?, load(1, "layer")?],
        })
    }

    fn measurements(&self, rel: &str, domain: Domain) -> Result<MeasurementSet, CliError> {
        self.require(rel, "make-dataset")?;
        let set = load_measurements(&self.dir.join(rel))?;
        if set.is_empty() {
            return Ok(MeasurementSet::new(domain));
        }
        if set.domain != domain {
            return Err(CliError::Format(format!(
                "{rel}: expected {} measurements",
                domain.as_str()
            )));
        }
        Ok(set)
    }

    fn records(&self, p: usize) -> Result<PairRecords, CliError> {
        let ground = |s| self.measurements(&data_path(p, s, "ground"), Domain::Ground);
        let aerial = |s| self.measurements(&data_path(p, s, "aerial"), Domain::Aerial);
        let holdout = |s| {
            (0..self.cfg.bench.holdout_draws)
                .map(|k| {
                    self.measurements(&data_path(p, s, &format!("holdout{k}")), Domain::Ground)
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let rel = routes_path(p);
        self.require(&rel, "make-dataset")?;
        let eval_routes: Vec<Route> =
            serde_json::from_str(&std::fs::read_to_string(self.dir.join(&rel))?)
                .map_err(|e| CliError::Format(format!("{rel}: {e}")))?;
        Ok(PairRecords {
            ground: [ground(0)?, ground(1)?],
            holdout: [holdout(0)?, holdout(1)?],
            aerial: [aerial(0)?, aerial(1)?],
            eval_routes,
        })
    }

    /// Benchmark pairs assembled from the run directory's files.
    fn pairs(&self) -> Result<Vec<PairData>, CliError> {
        let (scene, idx) = self.scene()?;
        let mut out = Vec::with_capacity(idx.len());
        for (p, &pair) in idx.iter().enumerate() {
            out.push(assemble_pair(
                &scene,
                &self.cfg.bench,
                pair,
                self.maps(p)?,
                self.records(p)?,
                &self.cfg.norm,
            )?);
        }
        Ok(out)
    }

    fn model(&self, stage: &'static str) -> Result<DualTxModel, CliError> {
        let rel = ckpt(stage);
        self.require(&rel, stage)?;
        let model = DualTxModel::load(&self.dir.join(rel))?;
        if model.arch != self.cfg.model || model.norm != self.cfg.norm {
            return Err(CliError::Format(format!(
                "{stage}.ckpt does not match model./norm. settings"
            )));
        }
        Ok(model)
    }

    fn save_stage(
        &mut self,
        stage: &str,
        model: &DualTxModel,
        rep: &StageReport,
    ) -> Result<(), CliError> {
        let mut bytes = Vec::new();
        model.write_checkpoint(&mut bytes)?;
        self.write(&ckpt(stage), &bytes)?;
        self.write(&report(stage), rep.to_text().as_bytes())
    }

    /// Report of a stage whose toggle is off.
    fn skipped(stage: &str, model: &DualTxModel) -> StageReport {
        let mut r = StageReport::new(stage);
        r.notes.push("skipped: stage toggle off".into());
        r.checksum = model.checksum(&[]);
        r
    }
}

/// Benchmark pairs assembled from the artifacts of a run directory.
pub fn load_pairs(run_dir: &Path) -> Result<Vec<PairData>, CliError> {
    let manifest = RunManifest::load(run_dir)?.ok_or_else(|| CliError::Missing {
        artifact: crate::manifest::MANIFEST.to_string(),
        producer: "gen-scene",
    })?;
    let cfg = manifest.config()?;
    Run {
        dir: run_dir,
        cfg,
        manifest,
        outputs: Vec::new(),
    }
    .pairs()
}

fn status(on: bool) -> StageStatus {
    if on {
        StageStatus::Done
    } else {
        StageStatus::Skipped
    }
}

/// Resolves the configuration: an explicit file, else the one recorded in
/// the run directory, else the defaults; `seed` overrides either.
fn resolve_config(
    config: Option<&Path>,
    manifest: Option<&RunManifest>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match (config, manifest) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(m)) => m.config()?,
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.resolve();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command in `run_dir`, returning the artifacts it wrote.
pub fn execute(
    cmd: &Command,
    run_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(run_dir)?;
    let _lock = DirLock::acquire(run_dir)?;
    let existing = RunManifest::load(run_dir)?;
    let cfg = resolve_config(config, existing.as_ref(), seed)?;
    let manifest = match existing {
        Some(m) if m.config_digest != cfg.digest() => {
            return Err(CliError::Config(format!(
                "{} holds a run with config digest {}, this config has digest {}; use a fresh --run-dir",
                run_dir.display(),
                m.config_digest,
                cfg.digest()
            )))
        }
        Some(m) => m,
        None => RunManifest::new(&cfg),
    };
    info!("{} with config:\n{}", cmd.name(), cfg.to_text());
    let mut run = Run {
        dir: run_dir,
        cfg,
        manifest,
        outputs: Vec::new(),
    };
    let (st, inputs) = dispatch(cmd, &mut run)?;
    let Run {
        mut manifest,
        outputs,
        ..
    } = run;
    manifest.record(run_dir, cmd.name(), st, inputs, &outputs)?;
    manifest.save(run_dir)?;
    Ok(outputs)
}

fn dispatch(
    cmd: &Command,
    run: &mut Run,
) -> Result<(StageStatus, &'static [&'static str]), CliError> {
    let cfg = run.cfg.clone();
    let train = &cfg.train;
    match cmd {
        Command::GenScene => {
            let (scene, _) = select_scene(&cfg.bench, cfg.seed)?;
            run.write(SCENE, scene_to_string(&scene).as_bytes())?;
            Ok((StageStatus::Done, &[]))
        }
        Command::Simulate => {
            let (scene, idx) = run.scene()?;
            let target = cfg.bench.target_params(cfg.seed);
            for (p, &pair) in idx.iter().enumerate() {
                let maps = simulate_pair(&scene, &cfg.bench, &target, pair)?;
                for (kind, m) in [
                    ("source", &maps.source),
                    ("target", &maps.target),
                    ("layer", &maps.layer),
                ] {
                    for (s, map) in m.iter().enumerate() {
                        let mut bytes = Vec::new();
                        write_radio_map(map, &mut bytes)?;
                        run.write(&map_path(p, s, kind), &bytes)?;
                    }
                }
            }
            Ok((StageStatus::Done, &["gen-scene"]))
        }
        Command::MakeDataset => {
            let (scene, idx) = run.scene()?;
            for (p, &pair) in idx.iter().enumerate() {
                let rec = pair_records(&scene, &cfg.bench, cfg.seed, p, pair, &run.maps(p)?)?;
                for s in 0..2 {
                    run.write(
                        &data_path(p, s, "ground"),
                        measurements_to_csv(&rec.ground[s]).as_bytes(),
                    )?;
                    run.write(
                        &data_path(p, s, "aerial"),
                        measurements_to_csv(&rec.aerial[s]).as_bytes(),
                    )?;
                    for (k, h) in rec.holdout[s].iter().enumerate() {
                        run.write(
                            &data_path(p, s, &format!("holdout{k}")),
                            measurements_to_csv(h).as_bytes(),
                        )?;
                    }
                }
                let routes =
                    serde_json::to_string_pretty(&rec.eval_routes).expect("routes serialize");
                run.write(&routes_path(p), routes.as_bytes())?;
            }
            Ok((StageStatus::Done, &["simulate"]))
        }
        Command::Pretrain => {
            let pairs = run.pairs()?;
            let mut model = DualTxModel::new(
                cfg.model.clone(),
                cfg.norm,
                rng::derive_seed(train.seed, "model"),
            );
            let rep = if train.pretrain {
                pretrain(&mut model, &pairs, train)?
            } else {
                Run::skipped("pretrain", &model)
            };
            run.save_stage("pretrain", &model, &rep)?;
            Ok((status(train.pretrain), &["make-dataset"]))
        }
        Command::Adapt => {
            let pairs = run.pairs()?;
            let mut model = run.model("pretrain")?;
            let rep = if train.adda {
                adapt(&mut model, &pairs, train)?
            } else {
                model.sync_target();
                Run::skipped("adapt", &model)
            };
            run.save_stage("adapt", &model, &rep)?;
            Ok((status(train.adda), &["pretrain"]))
        }
        Command::Finetune => {
            let pairs = run.pairs()?;
            let mut model = run.model("adapt")?;
            let rep = if train.finetune {
                finetune(&mut model, &pairs, train)?
            } else {
                Run::skipped("finetune", &model)
            };
            run.save_stage("finetune", &model, &rep)?;
            Ok((status(train.finetune), &["adapt"]))
        }
        Command::Baseline => {
            let pairs = run.pairs()?;
            let b = &cfg.eval.baselines;
            let (kriging, fallbacks) = evaluate_kriging(&pairs, b)?;
            let gp = evaluate_gp(&pairs, b)?;
            let (ae, ae_train) = evaluate_autoencoder(&pairs, cfg.norm, b)?;
            let mut text = String::new();
            for r in [&kriging, &gp, &ae] {
                text.push_str(&r.to_text());
                text.push('\n');
            }
            text.push_str(&format!("kriging_fallbacks {fallbacks}\n\n"));
            text.push_str(&ae_train.to_text());
            let reports = vec![kriging, gp, ae];
            run.write(
                BASELINES,
                serde_json::to_string_pretty(&reports)
                    .expect("reports serialize")
                    .as_bytes(),
            )?;
            run.write(&report("baseline"), text.as_bytes())?;
            Ok((StageStatus::Done, &["make-dataset"]))
        }
        Command::Evaluate => {
            let model = run.model("finetune")?;
            run.require(BASELINES, "baseline")?;
            let baselines: Vec<RouteReport> =
                serde_json::from_str(&std::fs::read_to_string(run.dir.join(BASELINES))?)
                    .map_err(|e| CliError::Format(format!("{BASELINES}: {e}")))?;
            let pairs = run.pairs()?;
            let ours = evaluate_model("proposed", &model, &pairs, train)?;
            let table = Comparison::new(cfg.seed, &cfg.digest(), ours, baselines)?;
            run.write(&report("evaluation"), table.to_text().as_bytes())?;
            Ok((StageStatus::Done, &["finetune", "baseline"]))
        }
        Command::Ablate => {
            let pairs = run.pairs()?;
            let rows: Vec<_> = ablation_rows().iter().map(|r| r.apply(train)).collect();
            let table = ablation_suite(&cfg.model, cfg.norm, &pairs, &rows)?;
            let mut text = table.to_text();
            for (row, stages) in table.rows.iter().zip(&table.stages) {
                text.push_str(&format!("\nrow {}\n", row.label()));
                for s in stages {
                    text.push_str(&s.to_text());
                }
            }
            run.write(&report("ablation"), text.as_bytes())?;
            Ok((StageStatus::Done, &["make-dataset"]))
        }
        Command::PredictRoute { pair, tx, route } => {
            let model = run.model("finetune")?;
            let pairs = run.pairs()?;
            let pd = pairs.get(*pair).ok_or_else(|| {
                CliError::Config(format!("--pair {pair} outside [0, {})", pairs.len()))
            })?;
            if *tx > 1 {
                return Err(CliError::Config(format!("--tx {tx} outside [0, 2)")));
            }
            let r = pd.eval_routes.get(*route).ok_or_else(|| {
                CliError::Config(format!(
                    "--route {route} outside [0, {})",
                    pd.eval_routes.len()
                ))
            })?;
            let pred = predict_route(&model, &pd.ground_grid[*tx], r, train.decoder_for(*tx))?;
            let truth: Vec<f64> = route_voxels(&pd.grid, r)?
                .iter()
                .map(|&i| pd.target_maps[*tx].values[i] as f64)
                .collect();
            let arc: Vec<f64> = r.sample_points().into_iter().map(|(_, a)| a).collect();
            println!("route rmse {:.6} dB", route_rmse(&pred, &truth)?);
            run.write(
                &format!("profiles/pair{pair}_tx{tx}_route{route}.csv"),
                profile_csv(&arc, &pred, &truth)?.as_bytes(),
            )?;
            Ok((StageStatus::Done, &["finetune"]))
        }
        Command::EmitFigures => {
            let model = run.model("finetune")?;
            let pairs = run.pairs()?;
            let level = cfg.eval.slice_level;
            for (p, pd) in pairs.iter().enumerate() {
                for s in 0..2 {
                    let pred = predict_map(&model, &pd.ground_grid[s], train.decoder_for(s))?;
                    let pred_map = RadioMap {
                        cell_id: pd.cells[s].clone(),
                        grid: pd.grid.clone(),
                        values: pred.iter().map(|&v| v as f32).collect(),
                    };
                    for (kind, m) in [
                        ("pred", &pred_map),
                        ("truth", &pd.target_maps[s]),
                        ("source", &pd.source_maps[s]),
                    ] {
                        run.write(
                            &format!("figures/slice_pair{p}_tx{s}_{kind}.csv"),
                            slice_csv(m, level)?.as_bytes(),
                        )?;
                    }
                    for (r, route) in pd.eval_routes.iter().enumerate() {
                        let voxels = route_voxels(&pd.grid, route)?;
                        let pv: Vec<f64> = voxels.iter().map(|&i| pred[i]).collect();
                        let tv: Vec<f64> = voxels
                            .iter()
                            .map(|&i| pd.target_maps[s].values[i] as f64)
                            .collect();
                        let arc: Vec<f64> =
                            route.sample_points().into_iter().map(|(_, a)| a).collect();
                        run.write(
                            &format!("figures/profile_pair{p}_tx{s}_route{r}.csv"),
                            profile_csv(&arc, &pv, &tv)?.as_bytes(),
                        )?;
                    }
                }
            }
            Ok((StageStatus::Done, &["finetune"]))
        }
    }
}
