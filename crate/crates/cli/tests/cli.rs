use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use skymap_cli::{execute, load_pairs, CliError, Command, RunConfig, RunManifest, StageStatus};
use skymap_core::neural::DualTxModel;
use skymap_core::pipeline::{build_benchmark, run};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.conf")
}

fn skymap(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_skymap"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn skymap");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const CHAIN: [&str; 9] = [
    "gen-scene",
    "simulate",
    "make-dataset",
    "pretrain",
    "adapt",
    "finetune",
    "baseline",
    "evaluate",
    "emit-figures",
];

fn run_chain(dir: &Path, extra: &[&str]) {
    for c in CHAIN {
        let mut args = vec![c];
        args.extend_from_slice(extra);
        let (code, err) = skymap(dir, &args);
        assert_eq!(code, 0, "{c} failed: {err}");
    }
}

/// Relative path → bytes of every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn config_text_round_trips() {
    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let back = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    assert_ne!(cfg.digest(), RunConfig::default().digest());
}

#[test]
fn config_defaults_are_echoed_and_seed_propagates() {
    let mut cfg = RunConfig::default();
    let flat = cfg.to_flat();
    for key in [
        "seed",
        "scene.extent_x",
        "prop.pl_exponent_nlos",
        "data.crop",
        "mask.r1",
        "model.base_channels",
        "norm.lo",
        "train.pretrain_lr",
        "eval.slice_level",
    ] {
        assert!(flat.contains_key(key), "missing {key}");
    }
    assert!(!flat.contains_key("train.seed"));
    cfg.set("seed", "17").unwrap();
    assert_eq!(cfg.train.seed, 17);
    assert_eq!(cfg.eval.baselines.gp.seed, 17);
    cfg.set("model.base_channels", "8").unwrap();
    assert_eq!(cfg.eval.baselines.autoencoder.arch.base_channels, 8);
    assert!(!cfg.eval.baselines.autoencoder.arch.attention);
}

#[test]
fn config_errors_name_the_field() {
    let msg = |r: Result<RunConfig, CliError>| match r {
        Err(e @ CliError::Config(_)) => e.to_string(),
        other => panic!("expected config error, got {other:?}"),
    };
    assert!(msg(RunConfig::parse("train.no_such_key = 1")).contains("train.no_such_key"));
    assert!(msg(RunConfig::parse("train.pretrain_epochs = lots")).contains("train.pretrain_epochs"));
    assert!(msg(RunConfig::parse("train.seed = 3")).contains("train.seed"));
    assert!(msg(RunConfig::parse("just words")).contains("line 1"));
    let bad = RunConfig::parse("train.pretrain_lr = -1").unwrap();
    assert!(bad
        .validate()
        .unwrap_err()
        .to_string()
        .contains("pretrain_lr"));
    let bad = RunConfig::parse("mask.p_near = 1.0").unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn manifest_reproduces_the_config() {
    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let m = RunManifest::new(&cfg);
    assert_eq!(m.config_digest, cfg.digest());
    assert_eq!(m.config().unwrap(), cfg);
}

#[test]
fn full_chain_reproduces_bytes_and_matches_library() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_chain(a.path(), &["--threads", "1"]);
    run_chain(b.path(), &["--threads", "3"]);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between thread counts", k.display());
    }

    let report = String::from_utf8(sa[Path::new("evaluation.report")].clone()).unwrap();
    for m in [
        "proposed",
        "kriging",
        "gp",
        "autoencoder",
        "improvement_vs_gp",
    ] {
        assert!(report.contains(m), "report lacks {m}");
    }

    // rerunning a command leaves every byte unchanged
    let (code, err) = skymap(a.path(), &["finetune"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(snapshot(a.path()), sa);

    let manifest = RunManifest::load(a.path()).unwrap().unwrap();
    for c in CHAIN {
        assert_eq!(manifest.stages[c].status, StageStatus::Done, "{c}");
    }

    // the file-based chain equals the in-memory pipeline
    let cfg = manifest.config().unwrap();
    let bench = build_benchmark(&cfg.bench, cfg.seed, &cfg.norm).unwrap();
    let pairs = load_pairs(a.path()).unwrap();
    assert!(
        pairs == bench.pairs,
        "loaded pairs differ from the in-memory benchmark"
    );
    let trained = run(&cfg.model, cfg.norm, &bench.pairs, &cfg.train).unwrap();
    let mut bytes = Vec::new();
    trained.model.write_checkpoint(&mut bytes).unwrap();
    assert!(
        bytes == sa[Path::new("finetune.ckpt")],
        "checkpoint differs from the in-memory pipeline"
    );
    let loaded = DualTxModel::load(&a.path().join("finetune.ckpt")).unwrap();
    assert_eq!(loaded.checksum(&[]), trained.model.checksum(&[]));
}

#[test]
fn evaluate_before_finetune_reports_missing_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    for c in ["gen-scene", "simulate", "make-dataset", "pretrain", "adapt"] {
        assert_eq!(skymap(d.path(), &[c]).0, 0, "{c}");
    }
    let (code, err) = skymap(d.path(), &["evaluate"]);
    assert_eq!(code, 3, "{err}");
    assert!(
        err.contains("finetune.ckpt") && err.contains("skymap finetune"),
        "{err}"
    );
    let (code, err) = skymap(d.path(), &["emit-figures"]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn missing_upstream_names_the_producer() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = skymap(d.path(), &["simulate"]);
    assert_eq!(code, 3);
    assert!(err.contains("gen-scene"), "{err}");
    let (code, err) = skymap(d.path(), &["pretrain"]);
    assert_eq!(code, 3);
    assert!(err.contains("gen-scene"), "{err}");
}

#[test]
fn config_violations_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let conf = d.path().join("bad.conf");
    std::fs::write(&conf, "train.finetune_lr = 0\n").unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_skymap"))
        .args(["--run-dir"])
        .arg(d.path().join("run"))
        .arg("--config")
        .arg(&conf)
        .arg("gen-scene")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune_lr"));

    // a run directory keeps the config it was created with
    let run = d.path().join("run2");
    assert_eq!(skymap(&run, &["gen-scene"]).0, 0);
    let (code, err) = skymap(&run, &["gen-scene", "--seed", "99"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("digest"));
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(skymap(d.path(), &["gen-scene", "--seed", "11"]).0, 0);
    let m = RunManifest::load(d.path()).unwrap().unwrap();
    assert_eq!(m.seed, 11);
    assert_eq!(m.config["seed"], serde_json::json!(11));
    // later commands without --seed reuse the recorded configuration
    let out = Process::new(env!("CARGO_BIN_EXE_skymap"))
        .arg("--run-dir")
        .arg(d.path())
        .arg("simulate")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn corrupt_artifacts_exit_5() {
    let d = tempfile::tempdir().unwrap();
    for c in ["gen-scene", "simulate", "make-dataset", "pretrain"] {
        assert_eq!(skymap(d.path(), &[c]).0, 0, "{c}");
    }
    std::fs::write(d.path().join("pretrain.ckpt"), b"not a checkpoint").unwrap();
    let (code, err) = skymap(d.path(), &["adapt"]);
    assert_eq!(code, 5, "{err}");

    std::fs::write(
        d.path().join("data/pair0_tx0_ground.csv"),
        "x,y,z,cell_id,rsrp_dbm,domain\n1,2,3,,4,ground\n",
    )
    .unwrap();
    let (code, err) = skymap(d.path(), &["baseline"]);
    assert_eq!(code, 5, "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn locked_run_directory_is_refused() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("manifest.lock"), b"").unwrap();
    let (code, err) = skymap(d.path(), &["gen-scene"]);
    assert_eq!(code, 5);
    assert!(err.contains("locked"), "{err}");
}

#[test]
fn toggled_off_stages_are_recorded_as_skipped() {
    let d = tempfile::tempdir().unwrap();
    let conf = d.path().join("noadda.conf");
    let mut text = std::fs::read_to_string(smoke_config()).unwrap();
    text.push_str("train.adda = false\n");
    std::fs::write(&conf, text).unwrap();
    let run_dir = d.path().join("run");
    for c in [
        "gen-scene",
        "simulate",
        "make-dataset",
        "pretrain",
        "adapt",
        "finetune",
    ] {
        let r = execute(&cli_command(c), &run_dir, Some(&conf), None);
        assert!(r.is_ok(), "{c}: {r:?}");
    }
    let m = RunManifest::load(&run_dir).unwrap().unwrap();
    assert_eq!(m.stages["adapt"].status, StageStatus::Skipped);
    assert_eq!(m.stages["finetune"].status, StageStatus::Done);
    let report = std::fs::read_to_string(run_dir.join("adapt.report")).unwrap();
    assert!(report.contains("skipped"));
}

#[test]
fn predict_route_writes_profile_and_checks_indices() {
    let d = tempfile::tempdir().unwrap();
    for c in [
        "gen-scene",
        "simulate",
        "make-dataset",
        "pretrain",
        "adapt",
        "finetune",
    ] {
        assert_eq!(skymap(d.path(), &[c]).0, 0, "{c}");
    }
    let (code, err) = skymap(
        d.path(),
        &["predict-route", "--pair", "1", "--tx", "1", "--route", "1"],
    );
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(d.path().join("profiles/pair1_tx1_route1.csv")).unwrap();
    assert!(csv.starts_with("arc_m,pred_dbm,truth_dbm\n"));
    assert!(csv.lines().count() > 2);
    let (code, _) = skymap(d.path(), &["predict-route", "--pair", "9"]);
    assert_eq!(code, 2);
}

fn cli_command(name: &str) -> Command {
    match name {
        "gen-scene" => Command::GenScene,
        "simulate" => Command::Simulate,
        "make-dataset" => Command::MakeDataset,
        "pretrain" => Command::Pretrain,
        "adapt" => Command::Adapt,
        "finetune" => Command::Finetune,
        other => panic!("unknown command {other}"),
    }
}
