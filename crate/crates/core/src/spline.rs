//! Restricted (natural) cubic spline bases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knot placement for one spline-expanded variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub variable: String,
    pub knots: Vec<f64>,
}

impl SplineSpec {
    pub fn new(variable: impl Into<String>, knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 3 {
            return Err(Error::DegenerateKnots(format!("need at least 3 knots, got {}", knots.len())));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateKnots(format!("knots not strictly increasing: {knots:?}")));
        }
        Ok(SplineSpec { variable: variable.into(), knots })
    }

    /// Number of basis columns: one linear term plus `k - 2` cubic terms.
    pub fn n_columns(&self) -> usize {
        self.knots.len() - 1
    }

    /// Column names `<variable>_s1 .. <variable>_s{k-1}`.
    pub fn column_names(&self) -> Vec<String> {
        (1..=self.n_columns()).map(|j| format!("{}_s{j}", self.variable)).collect()
    }
}

/// Quantile levels (percent) used for `k` knots.
pub fn knot_levels(k: usize) -> Vec<f64> {
    match k {
        3 => vec![10.0, 50.0, 90.0],
        4 => vec![5.0, 35.0, 65.0, 95.0],
        _ => (0..k).map(|j| 5.0 + 90.0 * j as f64 / (k - 1) as f64).collect(),
    }
}

/// Linear-interpolation sample quantile (type 7), `q` in [0, 1].
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    interpolate(sorted, (sorted.len() - 1) as f64 * q)
}

/// As [`quantile_sorted`] with the level given in percent.
fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    interpolate(sorted, (sorted.len() - 1) as f64 * pct / 100.0)
}

fn interpolate(sorted: &[f64], h: f64) -> f64 {
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at the standard trimmed quantiles of `x`.
pub fn quantile_knots(x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 3 {
        return Err(Error::DegenerateKnots(format!("need k >= 3, got {k}")));
    }
    let mut sorted: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateKnots(format!(
            "{} distinct values cannot support {k} knots",
            distinct.len()
        )));
    }
    let knots: Vec<f64> = knot_levels(k).iter().map(|&p| percentile_sorted(&sorted, p)).collect();
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DegenerateKnots(format!("tied quantile knots {knots:?}")));
    }
    Ok(knots)
}

fn cube_pos(v: f64) -> f64 {
    if v > 0.0 { v * v * v } else { 0.0 }
}

/// Restricted cubic spline basis at `x`: `x` itself followed by `k - 2`
/// truncated-power terms scaled by `(t_k - t_1)^2`, each linear beyond the
/// boundary knots.
pub fn rcs_basis(x: f64, spec: &SplineSpec) -> Vec<f64> {
    let t = &spec.knots;
    let k = t.len();
    let (tk, tk1) = (t[k - 1], t[k - 2]);
    let norm = (tk - t[0]).powi(2);
    let mut out = Vec::with_capacity(k - 1);
    out.push(x);
    for tj in &t[..k - 2] {
        let v = cube_pos(x - tj) - cube_pos(x - tk1) * (tk - tj) / (tk - tk1)
            + cube_pos(x - tk) * (tk1 - tj) / (tk - tk1);
        out.push(v / norm);
    }
    out
}
