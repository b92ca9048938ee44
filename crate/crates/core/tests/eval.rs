use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use skymap_core::datasets::{NormWindow, Route};
use skymap_core::eval::{
    ablation_rows, ablation_suite, aggregate, emit_profile, emit_slice, improvement_pct,
    profile_csv, route_rmse, slice_csv, AblationRow, Comparison, EvalError, RouteReport,
};
use skymap_core::neural::Arch;
use skymap_core::pipeline::TrainConfig;
use skymap_core::propsim::RadioMap;
use skymap_core::GridSpec;

#[test]
fn rmse_examples() {
    assert_eq!(route_rmse(&[-80.0, -95.5], &[-80.0, -95.5]).unwrap(), 0.0);
    let truth = [-70.0, -85.0, -101.0];
    let off: Vec<f64> = truth.iter().map(|t| t + 2.0).collect();
    assert_abs_diff_eq!(route_rmse(&off, &truth).unwrap(), 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(
        route_rmse(&[-80.0, -90.0], &[-83.0, -86.0]).unwrap(),
        12.5f64.sqrt(),
        epsilon = 1e-12
    );
    assert!(matches!(
        route_rmse(&[1.0], &[1.0, 2.0]),
        Err(EvalError::LengthMismatch { .. })
    ));
    assert!(matches!(route_rmse(&[], &[]), Err(EvalError::Empty(_))));
}

#[test]
fn aggregate_examples() {
    assert_eq!(aggregate(&[5.0]).unwrap(), (5.0, 5.0, 5.0));
    assert_eq!(aggregate(&[3.0, 5.0, 13.0]).unwrap(), (3.0, 7.0, 13.0));
    assert!(aggregate(&[]).is_err());
}

#[test]
fn improvement_examples() {
    assert_abs_diff_eq!(improvement_pct(5.3, 10.2).unwrap(), 48.0392, epsilon = 1e-4);
    assert_eq!(improvement_pct(7.0, 7.0).unwrap(), 0.0);
    assert_eq!(improvement_pct(0.0, 7.0).unwrap(), 100.0);
    assert!(improvement_pct(1.0, 0.0).is_err());
    assert!(improvement_pct(1.0, -2.0).is_err());
}

#[test]
fn comparison_lists_every_baseline() {
    let ours = RouteReport::new("proposed", vec![4.0, 6.0]).unwrap();
    let base = vec![
        RouteReport::new("kriging", vec![10.0, 10.0]).unwrap(),
        RouteReport::new("gp", vec![8.0]).unwrap(),
    ];
    let c = Comparison::new(7, "abc", ours, base).unwrap();
    assert_eq!(
        c.improvement_pct,
        vec![("kriging".to_string(), 50.0), ("gp".to_string(), 37.5)]
    );
    let text = c.to_text();
    assert!(text.starts_with("seed 7\nconfig_digest abc\n"));
    assert!(text.contains("improvement_vs_kriging 50.00%"));
    assert!(text.contains("method gp\nroutes 1\n"));
}

fn route() -> Route {
    Route {
        waypoints: vec![[5.0, 5.0, 65.0], [45.0, 5.0, 65.0], [45.0, 35.0, 65.0]],
        sample_spacing: 10.0,
    }
}

#[test]
fn profile_rows_match_sample_points_and_reparse_exactly() {
    let r = route();
    let n = r.sample_points().len();
    let truth: Vec<f64> = (0..n).map(|i| -80.0 - 0.1 * i as f64 - 1.0 / 3.0).collect();
    let pred: Vec<f64> = truth.iter().map(|t| t + 0.7).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    emit_profile(&r, &pred, &truth, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), n);
    let parsed: Vec<f64> = rows
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(parsed, truth);
    assert!(profile_csv(&[0.0], &[1.0, 2.0], &[1.0, 2.0]).is_err());
}

#[test]
fn slice_of_uniform_map_is_constant() {
    let grid = GridSpec::new([0.0; 3], [4, 3, 2], 10.0);
    let values = vec![-92.5; grid.len()];
    let map = RadioMap {
        cell_id: "c0".into(),
        grid,
        values,
    };
    let text = slice_csv(&map, 1).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| *r == "-92.5,-92.5,-92.5,-92.5"));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_slice(&map, 2, &dir.path().join("s.csv")),
        Err(EvalError::Level { level: 2, depth: 2 })
    ));
}

#[test]
fn ablation_rows_cover_the_toggle_table() {
    let rows = ablation_rows();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| **r == AblationRow::FULL).count(), 1);
    assert_eq!(
        AblationRow::FULL.label(),
        "pretrain=1 adda=1 finetune=1 dual_cell=1"
    );
    let base = TrainConfig::default();
    for r in &rows {
        assert_eq!(AblationRow::of(&r.apply(&base)), *r);
    }
}

#[test]
fn ablation_suite_rejects_bad_row_sets() {
    let arch = Arch {
        base_channels: 2,
        depth: 1,
        disc_width: 4,
        ..Default::default()
    };
    let base = TrainConfig::default();
    let rows: Vec<TrainConfig> = ablation_rows().iter().map(|r| r.apply(&base)).collect();
    let missing = &rows[..5];
    assert!(matches!(
        ablation_suite(&arch, NormWindow::default(), &[], missing),
        Err(EvalError::Rows(_))
    ));
    let mut twice = rows.clone();
    twice.push(rows[0].clone());
    assert!(matches!(
        ablation_suite(&arch, NormWindow::default(), &[], &twice),
        Err(EvalError::Rows(_))
    ));
    let mut drifted = rows.clone();
    drifted[2].finetune_lr = 5e-4;
    match ablation_suite(&arch, NormWindow::default(), &[], &drifted) {
        Err(EvalError::Rows(m)) => assert!(m.contains("finetune_lr"), "{m}"),
        other => panic!("expected a row error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aggregate_is_ordered_and_order_free(mut v in prop::collection::vec(0.0f64..60.0, 1..40), rot in 0usize..40) {
        let (b, m, w) = aggregate(&v).unwrap();
        prop_assert!(b <= m && m <= w);
        let k = rot % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert_eq!(aggregate(&v).unwrap(), (b, m, w));
    }

    #[test]
    fn rmse_is_symmetric_and_detects_offsets(
        truth in prop::collection::vec(-140.0f64..-40.0, 1..30),
        pred_off in prop::collection::vec(-10.0f64..10.0, 30),
        c in -20.0f64..20.0,
    ) {
        let pred: Vec<f64> = truth.iter().zip(&pred_off).map(|(t, o)| t + o).collect();
        prop_assert_eq!(route_rmse(&pred, &truth).unwrap(), route_rmse(&truth, &pred).unwrap());
        let shifted: Vec<f64> = truth.iter().map(|t| t + c).collect();
        prop_assert!((route_rmse(&shifted, &truth).unwrap() - c.abs()).abs() < 1e-9);
    }
}
