use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dist, points_of, BaselineError};
use crate::datasets::Measurement;

/// Largest number of samples used to build the empirical semivariogram;
/// larger sets are thinned by a fixed stride.
const VARIOGRAM_MAX_POINTS: usize = 1500;
/// Pivot ratio below which a kriging system counts as singular.
const SINGULAR_RATIO: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariogramFamily {
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    /// dB²
    pub nugget: f64,
    /// dB²
    pub sill: f64,
    /// m
    pub range: f64,
    pub family: VariogramFamily,
}

impl VariogramModel {
    pub fn exponential(nugget: f64, sill: f64, range: f64) -> Result<Self, BaselineError> {
        let vg = Self {
            nugget,
            sill,
            range,
            family: VariogramFamily::Exponential,
        };
        vg.validate()?;
        Ok(vg)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.nugget >= 0.0
            && self.sill > self.nugget
            && self.range > 0.0
            && self.sill.is_finite()
            && self.range.is_finite())
        {
            return Err(BaselineError::Param(format!(
                "variogram needs nugget >= 0, sill > nugget, range > 0 (got {}, {}, {})",
                self.nugget, self.sill, self.range
            )));
        }
        Ok(())
    }

    pub fn partial_sill(&self) -> f64 {
        self.sill - self.nugget
    }

    /// Semivariance; the lag-0 value is the nugget.
    pub fn gamma(&self, h: f64) -> f64 {
        match self.family {
            VariogramFamily::Exponential => {
                self.nugget + self.partial_sill() * (1.0 - (-h / self.range).exp())
            }
        }
    }

    /// Covariance `C(h) = sill − γ(h)` for `h > 0` and `C(0) = sill`.
    pub fn covariance(&self, h: f64) -> f64 {
        if h == 0.0 {
            self.sill
        } else {
            self.sill - self.gamma(h)
        }
    }
}

/// Binned empirical semivariogram up to a third of the largest pair
/// distance: (mean lag, semivariance, fit weight).
fn empirical(
    points: &[[f64; 3]],
    values: &[f64],
    n_bins: usize,
) -> Result<Vec<(f64, f64, f64)>, BaselineError> {
    let n = points.len();
    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            max_d = max_d.max(dist(&points[i], &points[j]));
        }
    }
    if max_d == 0.0 {
        return Err(BaselineError::DegenerateLag);
    }
    let max_lag = max_d / 3.0;
    let width = max_lag / n_bins as f64;
    let mut acc = vec![(0.0, 0.0, 0.0); n_bins];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(&points[i], &points[j]);
            if d == 0.0 || d > max_lag {
                continue;
            }
            let b = ((d / width) as usize).min(n_bins - 1);
            acc[b].0 += d;
            acc[b].1 += 0.5 * (values[i] - values[j]).powi(2);
            acc[b].2 += 1.0;
        }
    }
    let bins: Vec<_> = acc
        .into_iter()
        .filter(|b| b.2 > 0.0)
        .map(|(h, g, c)| (h / c, g / c, c * c * c / (h * h)))
        .collect();
    if bins.is_empty() {
        return Err(BaselineError::DegenerateLag);
    }
    Ok(bins)
}

/// Weighted least squares of `nugget + psill·(1 − e^{−h/r})` for a fixed
/// range (weights `N_h / h²`, favouring well-populated short lags), with both
/// coefficients constrained non-negative.
/// Returns `(nugget, psill, sse)`.
fn fit_fixed_range(bins: &[(f64, f64, f64)], range: f64) -> (f64, f64, f64) {
    let sse = |c0: f64, c1: f64| {
        bins.iter()
            .map(|&(h, g, w)| w * (g - c0 - c1 * (1.0 - (-h / range).exp())).powi(2))
            .sum::<f64>()
    };
    let (mut s1, mut sf, mut sff, mut sg, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(h, g, w) in bins {
        let f = 1.0 - (-h / range).exp();
        s1 += w;
        sf += w * f;
        sff += w * f * f;
        sg += w * g;
        sfg += w * f * g;
    }
    let mut candidates = vec![(sg / s1, 0.0)];
    if sff > 0.0 {
        candidates.push((0.0, sfg / sff));
    }
    let det = s1 * sff - sf * sf;
    if det.abs() > 1e-12 * s1 * sff {
        candidates.push(((sg * sff - sf * sfg) / det, (s1 * sfg - sf * sg) / det));
    }
    candidates
        .into_iter()
        .filter(|&(c0, c1)| c0 >= 0.0 && c1 >= 0.0)
        .map(|(c0, c1)| (c0, c1, sse(c0, c1)))
        .fold((0.0, 0.0, f64::INFINITY), |best, c| {
            if c.2 < best.2 {
                c
            } else {
                best
            }
        })
}

/// Least-squares exponential fit to the binned empirical semivariogram.
pub fn fit_variogram(ms: &[Measurement], n_bins: usize) -> Result<VariogramModel, BaselineError> {
    if ms.len() < 30 {
        return Err(BaselineError::TooFew {
            need: 30,
            got: ms.len(),
        });
    }
    if n_bins < 5 {
        return Err(BaselineError::Param(format!(
            "n_bins must be >= 5, got {n_bins}"
        )));
    }
    let (points, values) = points_of(ms);
    let stride = points.len().div_ceil(VARIOGRAM_MAX_POINTS);
    let points: Vec<_> = points.into_iter().step_by(stride).collect();
    let values: Vec<_> = values.into_iter().step_by(stride).collect();
    let bins = empirical(&points, &values, n_bins)?;

    let h_min = bins.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
    let h_max = bins.iter().map(|b| b.0).fold(0.0, f64::max);
    let (lo, hi) = ((0.1 * h_min).ln(), (10.0 * h_max).ln());
    const STEPS: usize = 400;
    let at = |k: f64| (lo + (hi - lo) * k / STEPS as f64).exp();
    let mut best = (0usize, fit_fixed_range(&bins, at(0.0)));
    for k in 1..=STEPS {
        let f = fit_fixed_range(&bins, at(k as f64));
        if f.2 < best.1 .2 {
            best = (k, f);
        }
    }
    // golden-section refinement between the neighbouring grid nodes
    let (mut a, mut b) = (
        best.0.saturating_sub(1) as f64,
        (best.0 + 1).min(STEPS) as f64,
    );
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if fit_fixed_range(&bins, at(c)).2 <= fit_fixed_range(&bins, at(d)).2 {
            b = d;
        } else {
            a = c;
        }
    }
    let mut range = at(0.5 * (a + b));
    let mut fit = fit_fixed_range(&bins, range);
    if fit.2 > best.1 .2 {
        range = at(best.0 as f64);
        fit = best.1;
    }
    let (nugget, psill, _) = fit;
    VariogramModel::exponential(nugget, nugget + psill.max(1e-12), range)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrigingResult {
    pub values: Vec<f64>,
    /// Queries answered by inverse-distance weighting because their kriging
    /// system was singular.
    pub fallbacks: usize,
}

/// Indices of the `k` samples nearest to `q`, ties broken by index.
fn nearest(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, dist(p, q)))
        .collect();
    let key = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, key);
        d.truncate(k);
    }
    d.sort_by(key);
    d
}

/// Ordinary-kriging weights over the `k` nearest samples, or `None` when
/// the system is singular.
pub fn kriging_weights(
    points: &[[f64; 3]],
    vg: &VariogramModel,
    q: &[f64; 3],
    k: usize,
) -> Option<Vec<(usize, f64)>> {
    let nb = nearest(points, q, k);
    let n = nb.len();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut rhs = DVector::<f64>::zeros(n + 1);
    for (r, &(i, d)) in nb.iter().enumerate() {
        for (c, &(j, _)) in nb.iter().enumerate() {
            a[(r, c)] = vg.covariance(dist(&points[i], &points[j]));
        }
        a[(r, n)] = 1.0;
        a[(n, r)] = 1.0;
        rhs[r] = vg.covariance(d);
    }
    rhs[n] = 1.0;
    let lu = a.full_piv_lu();
    let u = lu.u();
    let p0 = u[(0, 0)].abs();
    if p0 == 0.0 || (0..=n).any(|i| u[(i, i)].abs() <= SINGULAR_RATIO * p0) {
        return None;
    }
    let w = lu.solve(&rhs)?;
    if !w.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(
        nb.iter()
            .enumerate()
            .map(|(r, &(i, _))| (i, w[r]))
            .collect(),
    )
}

fn idw(points: &[[f64; 3]], values: &[f64], q: &[f64; 3], k: usize) -> f64 {
    let nb = nearest(points, q, k);
    let exact: Vec<f64> = nb
        .iter()
        .filter(|(_, d)| *d == 0.0)
        .map(|&(i, _)| values[i])
        .collect();
    if !exact.is_empty() {
        return exact.iter().sum::<f64>() / exact.len() as f64;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &(i, d) in &nb {
        let w = 1.0 / (d * d);
        num += w * values[i];
        den += w;
    }
    num / den
}

/// Ordinary-kriging predictions (dBm) from the `k_neighbors` nearest samples.
pub fn kriging_predict(
    ms: &[Measurement],
    vg: &VariogramModel,
    queries: &[[f64; 3]],
    k_neighbors: usize,
) -> Result<KrigingResult, BaselineError> {
    if k_neighbors < 3 {
        return Err(BaselineError::Param(format!(
            "k_neighbors must be >= 3, got {k_neighbors}"
        )));
    }
    if ms.is_empty() {
        return Err(BaselineError::TooFew { need: 1, got: 0 });
    }
    vg.validate()?;
    let (points, values) = points_of(ms);
    let out: Vec<(f64, bool)> = queries
        .par_iter()
        .map(|q| match kriging_weights(&points, vg, q, k_neighbors) {
            Some(w) => (w.iter().map(|&(i, wi)| wi * values[i]).sum(), false),
            None => (idw(&points, &values, q, k_neighbors), true),
        })
        .collect();
    Ok(KrigingResult {
        fallbacks: out.iter().filter(|o| o.1).count(),
        values: out.into_iter().map(|o| o.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Domain, Measurement};

    fn set(pts: &[([f64; 3], f64)]) -> Vec<Measurement> {
        pts.iter()
            .map(|&(position, rsrp)| Measurement {
                position,
                rsrp,
                cell_id: "c".into(),
                domain: Domain::Ground,
            })
            .collect()
    }

    #[test]
    fn lag_zero_is_nugget() {
        let vg = VariogramModel::exponential(1.5, 10.0, 100.0).unwrap();
        assert_eq!(vg.gamma(0.0), 1.5);
        assert!((vg.gamma(1e6) - 10.0).abs() < 1e-9);
        assert!(VariogramModel::exponential(2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn coincident_positions_are_degenerate() {
        let ms = set(&vec![([5.0, 5.0, 1.5], -80.0); 40]);
        assert!(matches!(
            fit_variogram(&ms, 10),
            Err(BaselineError::DegenerateLag)
        ));
    }

    #[test]
    fn duplicate_neighbours_fall_back_to_idw() {
        let mut pts: Vec<_> = (0..10)
            .map(|i| ([i as f64 * 10.0, 0.0, 0.0], -80.0 - i as f64))
            .collect();
        pts.push(([0.0, 0.0, 0.0], -70.0));
        let ms = set(&pts);
        let vg = VariogramModel::exponential(0.0, 10.0, 50.0).unwrap();
        let r = kriging_predict(&ms, &vg, &[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 4).unwrap();
        assert_eq!(r.fallbacks, 2);
        assert_eq!(r.values[1], -75.0);
    }
}
