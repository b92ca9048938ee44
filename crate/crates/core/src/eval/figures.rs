use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;
use crate::datasets::Route;
use crate::propsim::RadioMap;

/// `arc_m,pred_dbm,truth_dbm` rows; values use the shortest exact decimal
/// form so re-parsing reproduces them bit for bit.
pub fn profile_csv(arc: &[f64], pred: &[f64], truth: &[f64]) -> Result<String, EvalError> {
    if pred.len() != truth.len() || arc.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len().min(arc.len()),
        });
    }
    let mut s = String::from("arc_m,pred_dbm,truth_dbm\n");
    for ((a, p), t) in arc.iter().zip(pred).zip(truth) {
        writeln!(s, "{a},{p},{t}").expect("write to string");
    }
    Ok(s)
}

/// Writes the predicted and true profile along `route`, one row per sample point.
pub fn emit_profile(
    route: &Route,
    pred: &[f64],
    truth: &[f64],
    path: &Path,
) -> Result<(), EvalError> {
    let arc: Vec<f64> = route.sample_points().into_iter().map(|(_, a)| a).collect();
    std::fs::write(path, profile_csv(&arc, pred, truth)?)?;
    Ok(())
}

/// `ny` rows of `nx` comma-separated dBm values at altitude level `level`.
pub fn slice_csv(map: &RadioMap, level: usize) -> Result<String, EvalError> {
    let [nx, ny, nz] = map.grid.dims;
    if level >= nz {
        return Err(EvalError::Level { level, depth: nz });
    }
    let mut s = String::new();
    for y in 0..ny {
        let row: Vec<String> = (0..nx)
            .map(|x| map.values[map.grid.index(x, y, level)].to_string())
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn emit_slice(map: &RadioMap, level: usize, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, slice_csv(map, level)?)?;
    Ok(())
}
