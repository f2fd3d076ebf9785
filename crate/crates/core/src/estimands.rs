//! Excess-event estimands computed draw by draw from counterfactual samples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::McPosterior;
use crate::panel::OutcomePanel;
use crate::spline::quantile_sorted;

pub const PER_POPULATION: f64 = 100_000.0;

/// Posterior mean plus an equal-tail credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Mean and equal-tail empirical quantiles at `(1 -+ level) / 2`, linearly
/// interpolated between order statistics.
pub fn summarize(draws: &[f64], level: f64) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::invalid("cannot summarize an empty draw set"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("credible level {level} outside (0, 1)")));
    }
    if draws.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite draw"));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let tail = (1.0 - level) / 2.0;
    Ok(PosteriorSummary {
        mean,
        ci_low: quantile_sorted(&sorted, tail),
        ci_high: quantile_sorted(&sorted, 1.0 - tail),
        level,
    })
}

/// Excess events per 100,000 population.
pub fn excess_rate(theta: f64, population: f64) -> Result<f64> {
    if !(population > 0.0) {
        return Err(Error::invalid(format!("population must be positive, got {population}")));
    }
    Ok(PER_POPULATION * theta / population)
}

/// Per-unit excess events: for each treated unit, draw `m` is
/// `sum over treated periods of (Y_it - Yhat_it^(m)(0))`.
///
/// `cells` and `counterfactuals` are parallel: `counterfactuals[c][m]` is the
/// draw for `cells[c]`. The result is indexed like `panel.treated()`.
pub fn iee_draws(
    panel: &OutcomePanel,
    cells: &[(usize, usize)],
    counterfactuals: &[Vec<u64>],
) -> Result<Vec<Vec<i64>>> {
    if cells.len() != counterfactuals.len() {
        return Err(Error::invalid("cells and counterfactual draws differ in length"));
    }
    let m = counterfactuals.first().map_or(0, Vec::len);
    if counterfactuals.iter().any(|c| c.len() != m) {
        return Err(Error::invalid("cells carry different numbers of draws"));
    }
    let mut out = Vec::with_capacity(panel.treated().len());
    for &i in panel.treated() {
        let mut theta = vec![0i64; m];
        for t in panel.t0()..panel.n_periods() {
            let c = cells.iter().position(|&c| c == (i, t)).ok_or_else(|| {
                Error::invalid(format!(
                    "no counterfactual draws for unit {} period {t}",
                    panel.unit_ids[i]
                ))
            })?;
            let y = panel.y(i, t) as i64;
            for (th, &y0) in theta.iter_mut().zip(&counterfactuals[c]) {
                *th += y - y0 as i64;
            }
        }
        out.push(theta);
    }
    Ok(out)
}

/// Draws of the excess events and rate for one treated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEffects {
    pub storm_id: String,
    pub county_id: String,
    /// Population at the final period, the rate denominator.
    pub population: f64,
    pub iee: Vec<i64>,
    pub rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormEffects {
    pub storm_id: String,
    pub population: f64,
    pub events: Vec<i64>,
    pub rate: Vec<f64>,
}

/// Draw-aligned effects for a whole study. Index `m` of every sequence
/// comes from the same causal draw index in each storm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectDraws {
    pub n_draws: usize,
    pub units: Vec<UnitEffects>,
    pub storms: Vec<StormEffects>,
    pub tee: Vec<i64>,
    pub aer: Vec<f64>,
}

/// Unit effects for every treated unit of one fitted panel.
pub fn unit_effects(panel: &OutcomePanel, posterior: &McPosterior) -> Result<Vec<UnitEffects>> {
    let theta = iee_draws(panel, &posterior.cells, &posterior.counterfactuals)?;
    panel
        .treated()
        .iter()
        .zip(theta)
        .map(|(&i, iee)| {
            let population = panel.population(i);
            let rate = iee
                .iter()
                .map(|&th| excess_rate(th as f64, population))
                .collect::<Result<Vec<_>>>()?;
            Ok(UnitEffects {
                storm_id: panel.storm_id.clone(),
                county_id: panel.unit_ids[i].clone(),
                population,
                iee,
                rate,
            })
        })
        .collect()
}

/// Storm totals: summed events and the rate over pooled population.
pub fn storm_aggregates(units: &[UnitEffects]) -> Result<StormEffects> {
    let first = units.first().ok_or_else(|| Error::invalid("storm has no treated units"))?;
    let m = first.iee.len();
    if units.iter().any(|u| u.iee.len() != m || u.storm_id != first.storm_id) {
        return Err(Error::invalid("units disagree on storm or draw count"));
    }
    let population: f64 = units.iter().map(|u| u.population).sum();
    let events: Vec<i64> = (0..m).map(|k| units.iter().map(|u| u.iee[k]).sum()).collect();
    let rate = events
        .iter()
        .map(|&e| excess_rate(e as f64, population))
        .collect::<Result<Vec<_>>>()?;
    Ok(StormEffects { storm_id: first.storm_id.clone(), population, events, rate })
}

/// Total excess events and average excess rate, per draw, over every
/// treated unit of every storm.
pub fn study_aggregates(units: &[UnitEffects]) -> Result<(Vec<i64>, Vec<f64>)> {
    let first = units.first().ok_or_else(|| Error::invalid("study has no treated units"))?;
    let m = first.iee.len();
    if units.iter().any(|u| u.iee.len() != m || u.rate.len() != m) {
        return Err(Error::invalid("draw counts differ across units"));
    }
    let n = units.len() as f64;
    let tee = (0..m).map(|k| units.iter().map(|u| u.iee[k]).sum()).collect();
    let aer = (0..m).map(|k| units.iter().map(|u| u.rate[k]).sum::<f64>() / n).collect();
    Ok((tee, aer))
}

impl EffectDraws {
    /// Assemble study-level draws from per-unit effects, grouping storms in
    /// first-appearance order.
    pub fn from_units(units: Vec<UnitEffects>) -> Result<Self> {
        let (tee, aer) = study_aggregates(&units)?;
        let mut order: Vec<&str> = Vec::new();
        for u in &units {
            if !order.contains(&u.storm_id.as_str()) {
                order.push(&u.storm_id);
            }
        }
        let storms = order
            .iter()
            .map(|s| {
                let members: Vec<UnitEffects> =
                    units.iter().filter(|u| u.storm_id == *s).cloned().collect();
                storm_aggregates(&members)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EffectDraws { n_draws: tee.len(), units, storms, tee, aer })
    }

    /// Posterior-mean excess rate per unit, in `units` order.
    pub fn mean_rates(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.rate.iter().sum::<f64>() / u.rate.len() as f64).collect()
    }

    /// Excess rates of every unit at draw `m`, in `units` order.
    pub fn rates_at(&self, m: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.rate[m]).collect()
    }

    pub fn study_summary(&self, level: f64) -> Result<StudySummary> {
        let tee: Vec<f64> = self.tee.iter().map(|&v| v as f64).collect();
        Ok(StudySummary {
            n_exposures: self.units.len(),
            n_storms: self.storms.len(),
            n_draws: self.n_draws,
            tee: summarize(&tee, level)?,
            aer: summarize(&self.aer, level)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_exposures: usize,
    pub n_storms: usize,
    pub n_draws: usize,
    pub tee: PosteriorSummary,
    pub aer: PosteriorSummary,
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Per-county excess events and rates with credible intervals.
pub fn write_county_csv(path: &Path, effects: &EffectDraws, level: f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "storm_id", "county_id", "population", "iee_mean", "iee_low", "iee_high", "rate_mean",
        "rate_low", "rate_high",
    ])?;
    for u in &effects.units {
        let iee: Vec<f64> = u.iee.iter().map(|&v| v as f64).collect();
        let a = summarize(&iee, level)?;
        let r = summarize(&u.rate, level)?;
        w.write_record([
            u.storm_id.clone(),
            u.county_id.clone(),
            u.population.to_string(),
            a.mean.to_string(),
            a.ci_low.to_string(),
            a.ci_high.to_string(),
            r.mean.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-storm excess events and pooled rates with credible intervals.
pub fn write_storm_csv(path: &Path, effects: &EffectDraws, level: f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "storm_id", "n_treated", "population", "events_mean", "events_low", "events_high",
        "rate_mean", "rate_low", "rate_high",
    ])?;
    for s in &effects.storms {
        let n = effects.units.iter().filter(|u| u.storm_id == s.storm_id).count();
        let ev: Vec<f64> = s.events.iter().map(|&v| v as f64).collect();
        let a = summarize(&ev, level)?;
        let r = summarize(&s.rate, level)?;
        w.write_record([
            s.storm_id.clone(),
            n.to_string(),
            s.population.to_string(),
            a.mean.to_string(),
            a.ci_low.to_string(),
            a.ci_high.to_string(),
            r.mean.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_study_json(path: &Path, effects: &EffectDraws, level: f64) -> Result<()> {
    let s = effects.study_summary(level)?;
    let body = serde_json::to_string_pretty(&s)?;
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

/// Long-format draws: one row per (unit, draw).
pub fn write_draws_csv(path: &Path, effects: &EffectDraws) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["storm_id", "county_id", "draw", "iee", "rate"])?;
    for u in &effects.units {
        for (m, (iee, rate)) in u.iee.iter().zip(&u.rate).enumerate() {
            w.write_record([
                u.storm_id.as_str(),
                u.county_id.as_str(),
                &m.to_string(),
                &iee.to_string(),
                &rate.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read draws written by [`write_draws_csv`] back, given each unit's
/// population.
pub fn read_draws_csv(path: &Path, populations: &std::collections::BTreeMap<(String, String), f64>) -> Result<EffectDraws> {
    #[derive(Deserialize)]
    struct Row {
        storm_id: String,
        county_id: String,
        draw: usize,
        iee: i64,
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut units: Vec<UnitEffects> = Vec::new();
    for row in csv::Reader::from_reader(f).deserialize::<Row>() {
        let row = row?;
        let fresh = units
            .last()
            .is_none_or(|u| u.storm_id != row.storm_id || u.county_id != row.county_id);
        if fresh {
            let key = (row.storm_id.clone(), row.county_id.clone());
            let population = *populations.get(&key).ok_or_else(|| {
                Error::invalid(format!("no population for {} / {}", key.0, key.1))
            })?;
            units.push(UnitEffects {
                storm_id: row.storm_id,
                county_id: row.county_id,
                population,
                iee: Vec::new(),
                rate: Vec::new(),
            });
        }
        let u = units.last_mut().expect("pushed above");
        if row.draw != u.iee.len() {
            return Err(Error::invalid(format!("draws out of order for {}", u.county_id)));
        }
        u.rate.push(excess_rate(row.iee as f64, u.population)?);
        u.iee.push(row.iee);
    }
    EffectDraws::from_units(units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(storm: &str, id: &str, pop: f64, iee: Vec<i64>) -> UnitEffects {
        let rate = iee.iter().map(|&t| excess_rate(t as f64, pop).unwrap()).collect();
        UnitEffects { storm_id: storm.into(), county_id: id.into(), population: pop, iee, rate }
    }

    fn two_window_panel(y: [u64; 2]) -> OutcomePanel {
        OutcomePanel::new(
            "s",
            vec!["c".into(), "t".into()],
            vec![vec![5, 5, 5, 5], vec![5, 5, y[0], y[1]]],
            vec![vec![1000.0; 4]; 2],
            2,
            vec![1],
        )
        .unwrap()
    }

    #[test]
    fn iee_examples() {
        let p = two_window_panel([10, 4]);
        let cells = p.masked_cells();
        assert_eq!(cells, vec![(1, 2), (1, 3)]);
        let th = iee_draws(&p, &cells, &[vec![7, 10], vec![6, 4]]).unwrap();
        // (10-7)+(4-6) = 1; (10-10)+(4-4) = 0
        assert_eq!(th, vec![vec![1, 0]]);
        let single = OutcomePanel::new("s", vec!["t".into()], vec![vec![3, 10]], vec![vec![1.0; 2]], 1, vec![0]).unwrap();
        assert_eq!(iee_draws(&single, &[(0, 1)], &[vec![7]]).unwrap(), vec![vec![3]]);
        assert!(iee_draws(&p, &cells[..1], &[vec![7]]).is_err());
    }

    #[test]
    fn excess_rate_examples() {
        assert_eq!(excess_rate(3.0, 100_000.0).unwrap(), 3.0);
        assert_eq!(excess_rate(1.0, 50_000.0).unwrap(), 2.0);
        assert_eq!(excess_rate(0.0, 7.0).unwrap(), 0.0);
        assert!(excess_rate(1.0, 0.0).is_err());
    }

    #[test]
    fn storm_aggregate_examples() {
        let s = storm_aggregates(&[unit("s", "a", 1e5, vec![3]), unit("s", "b", 1e5, vec![-1])]).unwrap();
        assert_eq!(s.events, vec![2]);
        assert_eq!(s.rate, vec![1.0]);
        let one = unit("s", "a", 5e4, vec![3, 1]);
        let s = storm_aggregates(std::slice::from_ref(&one)).unwrap();
        assert_eq!(s.events, one.iee);
        assert_eq!(s.rate, one.rate);
        assert!(storm_aggregates(&[]).is_err());
    }

    #[test]
    fn study_aggregate_examples() {
        let one = unit("s", "a", 5e4, vec![4]);
        let (tee, aer) = study_aggregates(std::slice::from_ref(&one)).unwrap();
        assert_eq!((tee, aer), (one.iee.clone(), one.rate.clone()));
        let three = [unit("a", "x", 1e5, vec![2]), unit("a", "y", 1e5, vec![4]), unit("b", "z", 1e5, vec![6])];
        assert_eq!(study_aggregates(&three).unwrap().1, vec![4.0]);
        let zeros = [unit("a", "x", 1e5, vec![0, 0]), unit("b", "y", 3e4, vec![0, 0])];
        assert_eq!(study_aggregates(&zeros).unwrap(), (vec![0, 0], vec![0.0, 0.0]));
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize(&[1.0, 2.0, 3.0], 0.95).unwrap().mean, 2.0);
        let c = summarize(&[4.5; 7], 0.95).unwrap();
        assert_eq!((c.mean, c.ci_low, c.ci_high), (4.5, 4.5, 4.5));
        assert!(summarize(&[], 0.95).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = summarize(&z, 0.95).unwrap();
        assert!((s.ci_low + 1.96).abs() < 0.05 && (s.ci_high - 1.96).abs() < 0.05, "{s:?}");
    }

    #[test]
    fn draws_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = EffectDraws::from_units(vec![
            unit("a", "x", 1e5, vec![2, -1, 0]),
            unit("b", "z", 3e4, vec![6, 1, 1]),
        ])
        .unwrap();
        let path = dir.path().join("d.csv");
        write_draws_csv(&path, &e).unwrap();
        let pops = e.units.iter().map(|u| ((u.storm_id.clone(), u.county_id.clone()), u.population)).collect();
        assert_eq!(read_draws_csv(&path, &pops).unwrap(), e);
    }

    proptest! {
        #[test]
        fn study_identities_hold_per_draw(
            raw in proptest::collection::vec((1u8..4, 1_000u32..500_000, proptest::collection::vec(-50i64..50, 6)), 1..12)
        ) {
            let units: Vec<UnitEffects> = raw
                .iter()
                .enumerate()
                .map(|(k, (s, p, th))| unit(&format!("s{s}"), &format!("c{k}"), *p as f64, th.clone()))
                .collect();
            let e = EffectDraws::from_units(units).unwrap();
            for m in 0..6 {
                let tee: i64 = e.units.iter().map(|u| u.iee[m]).sum();
                prop_assert_eq!(e.tee[m], tee);
                let aer = e.units.iter().map(|u| u.rate[m]).sum::<f64>() / e.units.len() as f64;
                prop_assert_eq!(e.aer[m], aer);
                let by_storm: i64 = e.storms.iter().map(|s| s.events[m]).sum();
                prop_assert_eq!(by_storm, tee);
            }
        }

        #[test]
        fn doubling_population_halves_rate(th in -1000i64..1000, p in 1.0f64..1e7) {
            let a = excess_rate(th as f64, p).unwrap();
            let b = excess_rate(th as f64, 2.0 * p).unwrap();
            prop_assert!((a - 2.0 * b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn summarize_ignores_order(mut xs in proptest::collection::vec(-100.0f64..100.0, 2..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let a = summarize(&xs, 0.9).unwrap();
            xs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = summarize(&xs, 0.9).unwrap();
            prop_assert_eq!(a.ci_low, b.ci_low);
            prop_assert_eq!(a.ci_high, b.ci_high);
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0));
        }
    }
}
