//! Choosing the number of latent factors from PCA scree fractions.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::OutcomePanel;
use crate::plot::{line_chart, Series};

pub const DEFAULT_TARGET: f64 = 0.70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeResult {
    pub storm_id: String,
    /// Variance fraction per component, descending.
    pub fractions: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub target: f64,
    /// Smallest K whose cumulative fraction reaches `target`.
    pub recommended_k: usize,
}

fn first_reaching(cumulative: &[f64], target: f64) -> Option<usize> {
    if target <= 0.0 {
        return Some(1);
    }
    cumulative.iter().position(|&c| c >= target).map(|k| k + 1)
}

/// PCA of the panel without its final (treated) column.
///
/// Columns are mean-centered; with `standardize` they are also scaled to unit
/// variance (constant columns are left at zero).
pub fn variance_explained(panel: &OutcomePanel, standardize: bool, target: f64) -> Result<ScreeResult> {
    let n = panel.n_units();
    let t = panel.n_periods();
    if n < 2 || t < 2 {
        return Err(Error::invalid(format!("PCA needs N >= 2 and T >= 2, got {n} x {t}")));
    }
    let cols = t - 1;
    let mut m = DMatrix::from_fn(n, cols, |i, j| panel.y(i, j) as f64);
    for j in 0..cols {
        let mut col = m.column_mut(j);
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        if standardize {
            let sd = (col.norm_squared() / (n as f64 - 1.0)).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
    }
    let sv = m.singular_values();
    let mut eig: Vec<f64> = sv.iter().map(|s| s * s).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let (fractions, cumulative) = if total == 0.0 {
        (vec![0.0; eig.len()], vec![0.0; eig.len()])
    } else {
        let f: Vec<f64> = eig.iter().map(|e| e / total).collect();
        let mut acc = 0.0;
        let c = f.iter().map(|x| { acc += x; acc }).collect();
        (f, c)
    };
    let recommended_k = if cumulative.iter().all(|&c| c == 0.0) {
        1
    } else {
        first_reaching(&cumulative, target).unwrap_or(cols)
    };
    Ok(ScreeResult { storm_id: panel.storm_id.clone(), fractions, cumulative, target, recommended_k })
}

/// Cumulative fraction at each K averaged over storms. Storms with fewer
/// components carry their final value forward.
pub fn mean_cumulative(results: &[ScreeResult]) -> Vec<f64> {
    let len = results.iter().map(|r| r.cumulative.len()).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            results
                .iter()
                .map(|r| r.cumulative.get(k).or(r.cumulative.last()).copied().unwrap_or(0.0))
                .sum::<f64>()
                / results.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRecommendation {
    pub k: usize,
    pub target: f64,
    pub mean_cumulative: Vec<f64>,
    pub warning: Option<String>,
}

/// Smallest K whose across-storm mean cumulative fraction reaches `target`.
pub fn recommend_k(results: &[ScreeResult], target: f64) -> Result<KRecommendation> {
    if results.is_empty() {
        return Err(Error::invalid("no scree results"));
    }
    if !(target < 1.0) || target.is_nan() {
        return Err(Error::invalid(format!("target {target} must be below 1")));
    }
    let mean = mean_cumulative(results);
    let (k, warning) = match first_reaching(&mean, target) {
        Some(k) => (k, None),
        None => (
            mean.len(),
            Some(format!("no K reaches mean cumulative fraction {target}; using {}", mean.len())),
        ),
    };
    Ok(KRecommendation { k, target, mean_cumulative: mean, warning })
}

pub fn write_scree_csv(path: &Path, results: &[ScreeResult]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["storm_id", "component", "fraction", "cumulative"])?;
    for r in results {
        for (k, (f, c)) in r.fractions.iter().zip(&r.cumulative).enumerate() {
            w.write_record([r.storm_id.clone(), (k + 1).to_string(), f.to_string(), c.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scree plot of per-storm cumulative fractions plus their mean.
pub fn write_scree_svg(path: &Path, results: &[ScreeResult], target: f64) -> Result<()> {
    let mut series: Vec<Series> = results
        .iter()
        .take(5)
        .map(|r| Series {
            label: r.storm_id.clone(),
            points: r.cumulative.iter().enumerate().map(|(k, &c)| ((k + 1) as f64, c)).collect(),
        })
        .collect();
    let mean = mean_cumulative(results);
    series.insert(
        0,
        Series { label: "mean".into(), points: mean.iter().enumerate().map(|(k, &c)| ((k + 1) as f64, c)).collect() },
    );
    series.push(Series {
        label: format!("target {target}"),
        points: vec![(1.0, target), (mean.len().max(1) as f64, target)],
    });
    line_chart(path, "Cumulative variance explained", "components", "cumulative fraction", &series, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn panel(values: Vec<Vec<u64>>) -> OutcomePanel {
        let n = values.len();
        let t = values[0].len();
        OutcomePanel::new("s", (0..n).map(|i| format!("u{i:03}")).collect(), values, vec![vec![1.0; t]; n], t - 1, vec![])
            .unwrap()
    }

    fn scree(cum: &[f64]) -> ScreeResult {
        ScreeResult { storm_id: "x".into(), fractions: vec![], cumulative: cum.to_vec(), target: 0.7, recommended_k: 0 }
    }

    #[test]
    fn rank_one_is_all_first_component() {
        let u = [1u64, 3, 5, 2, 8];
        let v = [2u64, 1, 4, 3, 7, 99];
        let p = panel(u.iter().map(|a| v.iter().map(|b| a * b + 10).collect()).collect());
        let r = variance_explained(&p, false, 0.7).unwrap();
        assert!((r.fractions[0] - 1.0).abs() < 1e-12, "{:?}", r.fractions);
        assert_eq!(r.recommended_k, 1);
    }

    #[test]
    fn rank_two_plus_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Normal::new(0.0, 1.0).unwrap();
        let n = 60;
        let u: Vec<[f64; 2]> = (0..n).map(|_| [d.sample(&mut rng), d.sample(&mut rng)]).collect();
        let v: Vec<[f64; 2]> = (0..10).map(|_| [d.sample(&mut rng), d.sample(&mut rng)]).collect();
        let vals = u
            .iter()
            .map(|a| v.iter().map(|b| (10_000.0 + 1000.0 * (a[0] * b[0] + a[1] * b[1])).round() as u64).collect())
            .collect();
        let r = variance_explained(&panel(vals), false, 0.7).unwrap();
        assert!(r.cumulative[1] >= 0.999, "{:?}", r.cumulative);
        assert!(r.recommended_k <= 2);
    }

    #[test]
    fn iid_noise_spreads_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(1000.0, 30.0).unwrap();
        let vals = (0..100).map(|_| (0..10).map(|_| { let x: f64 = d.sample(&mut rng); x.round() as u64 }).collect()).collect();
        let r = variance_explained(&panel(vals), false, 0.7).unwrap();
        assert_eq!(r.fractions.len(), 9);
        assert!(r.fractions.iter().all(|&f| f < 0.3), "{:?}", r.fractions);
        assert!((r.cumulative[8] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_matrix() {
        let r = variance_explained(&panel(vec![vec![4; 5]; 6]), false, 0.7).unwrap();
        assert!(r.fractions.iter().all(|&f| f == 0.0));
        assert_eq!(r.recommended_k, 1);
        assert!(variance_explained(&panel(vec![vec![4; 5]]), false, 0.7).is_err());
    }

    #[test]
    fn recommend_examples() {
        let one = scree(&[0.5, 0.72, 0.8, 1.0]);
        assert_eq!(recommend_k(std::slice::from_ref(&one), 0.7).unwrap().k, 2);
        assert_eq!(recommend_k(&[one], 0.0).unwrap().k, 1);
        let a = scree(&[0.3, 0.45, 0.55, 0.63, 0.69, 0.8, 1.0]);
        let b = scree(&[0.4, 0.55, 0.66, 0.74, 0.75, 0.9, 1.0]);
        let rec = recommend_k(&[a.clone(), b.clone()], 0.7).unwrap();
        assert!((rec.mean_cumulative[3] - 0.685).abs() < 1e-12);
        assert_eq!(rec.k, 5);
        let low = recommend_k(&[scree(&[0.1, 0.2, 0.3])], 0.9).unwrap();
        assert_eq!(low.k, 3);
        assert!(low.warning.is_some());
    }

    proptest! {
        #[test]
        fn invariant_to_row_order_and_column_shift(
            vals in proptest::collection::vec(proptest::collection::vec(0u64..200, 6), 4..12),
            shift in 0u64..1000,
            col in 0usize..5,
        ) {
            let base = variance_explained(&panel(vals.clone()), false, 0.7).unwrap();
            let mut rev = vals.clone();
            rev.reverse();
            let a = variance_explained(&panel(rev), false, 0.7).unwrap();
            let mut shifted = vals.clone();
            for r in &mut shifted {
                r[col] += shift;
            }
            let b = variance_explained(&panel(shifted), false, 0.7).unwrap();
            for k in 0..base.fractions.len() {
                prop_assert!((a.fractions[k] - base.fractions[k]).abs() < 1e-9);
                prop_assert!((b.fractions[k] - base.fractions[k]).abs() < 1e-9);
            }
            prop_assert!(base.fractions.iter().all(|&f| f >= 0.0));
            prop_assert!(base.fractions.iter().sum::<f64>() <= 1.0 + 1e-9);
            prop_assert!(base.cumulative.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        }
    }
}
