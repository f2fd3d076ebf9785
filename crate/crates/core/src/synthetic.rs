//! Synthetic studies with known ground truth, and a brute-force grid
//! posterior for the intercept-only model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::model::nb_logpmf_log;
use crate::mc::{sample_nb, McParams, Prior};
use crate::panel::{
    great_circle_miles, window_offsets, CountyRecord, ExposureRecord, LatLon, OutcomePanel, GALE_FORCE_MS, N_WINDOWS,
};
use crate::panel::write_raw_inputs;
use crate::predictive::{write_predictors, PredictorRow};
use crate::seed::derive_seed;

/// How the treated-cell rate ratio is set for each treated county.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectModel {
    /// Every treated county has rate ratio `rho`.
    Constant { rho: f64 },
    /// `rho_i = base * exp(per_sd * z_i)` where `z_i` is the county's
    /// standardized synthetic windspeed.
    WindLinked { base: f64, per_sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub k_true: usize,
    pub n_storms: usize,
    /// Log of the baseline per-person rate in one window.
    pub alpha: f64,
    pub gamma_sd: f64,
    pub psi_sd: f64,
    pub u_sd: f64,
    pub v_sd: f64,
    pub eta: f64,
    pub treated_fraction: f64,
    pub effect: EffectModel,
    pub population_min: u64,
    pub population_max: u64,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            n_units: 60,
            n_periods: N_WINDOWS,
            k_true: 2,
            n_storms: 1,
            alpha: (0.002f64).ln(),
            gamma_sd: 0.2,
            psi_sd: 0.05,
            u_sd: 0.3,
            v_sd: 0.3,
            eta: 50.0,
            treated_fraction: 0.25,
            effect: EffectModel::Constant { rho: 1.5 },
            population_min: 10_000,
            population_max: 200_000,
            seed: 1,
        }
    }
}

impl TruthConfig {
    fn validate(&self) -> Result<()> {
        if self.k_true > 0 && self.k_true >= self.n_units.min(self.n_periods) {
            return Err(Error::invalid("K_true must be below min(N, T)"));
        }
        if self.n_periods < 2 || self.n_units < 2 || self.n_storms == 0 {
            return Err(Error::invalid("need N >= 2, T >= 2, S >= 1"));
        }
        if !(self.eta > 0.0) || self.population_min == 0 || self.population_min > self.population_max {
            return Err(Error::invalid("bad eta or population range"));
        }
        if !(0.0..=1.0).contains(&self.treated_fraction) {
            return Err(Error::invalid("treated fraction outside [0, 1]"));
        }
        match self.effect {
            EffectModel::Constant { rho } if !(rho > 0.0) => Err(Error::invalid("rho must be positive")),
            EffectModel::WindLinked { base, .. } if !(base > 0.0) => {
                Err(Error::invalid("base rate ratio must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn n_treated(&self) -> usize {
        ((self.n_units as f64 * self.treated_fraction).round() as usize).clamp(1, self.n_units - 1)
    }
}

/// Ground truth for one treated county.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatedTruth {
    pub storm_id: String,
    pub county_id: String,
    pub unit: usize,
    pub rho: f64,
    pub y1: Vec<u64>,
    pub y0: Vec<u64>,
    pub population: f64,
    /// `sum_t (Y_it(1) - Y_it(0))` over treated periods.
    pub iee: i64,
    pub excess_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormTruth {
    pub storm_id: String,
    pub params: McParams,
    pub treated: Vec<TreatedTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub storms: Vec<StormTruth>,
}

impl GroundTruth {
    pub fn treated(&self) -> impl Iterator<Item = &TreatedTruth> {
        self.storms.iter().flat_map(|s| s.treated.iter())
    }

    pub fn tee(&self) -> i64 {
        self.treated().map(|t| t.iee).sum()
    }

    pub fn aer(&self) -> f64 {
        let (s, n) = self.treated().fold((0.0, 0usize), |(s, n), t| (s + t.excess_rate, n + 1));
        s / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub panels: Vec<OutcomePanel>,
    pub predictors: Vec<PredictorRow>,
    pub truth: GroundTruth,
    pub counties: Vec<CountyRecord>,
    pub exposures: Vec<ExposureRecord>,
    pub approach_dates: BTreeMap<String, NaiveDate>,
}

const STATES: [&str; 5] = ["FL", "GA", "LA", "NC", "SC"];

fn storm_id(s: usize) -> String {
    format!("S{:02}", s + 1)
}

/// Generate a synthetic study.
///
/// Each storm has its own cluster of counties placed far from other
/// clusters, so control selection on the emitted CSVs reproduces the panels.
/// Panel rows are ordered controls then treated, each sorted by county id.
pub fn simulate_study(cfg: &TruthConfig) -> Result<SyntheticStudy> {
    cfg.validate()?;
    let mut panels = Vec::new();
    let mut predictors = Vec::new();
    let mut storms = Vec::new();
    let mut counties = Vec::new();
    let mut exposures = Vec::new();
    let mut approach_dates = BTreeMap::new();
    for s in 0..cfg.n_storms {
        let sid = storm_id(s);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &sid));
        let out = simulate_storm(cfg, s, &sid, &mut rng)?;
        panels.push(out.panel);
        predictors.extend(out.predictors);
        storms.push(out.truth);
        counties.extend(out.counties);
        exposures.extend(out.exposures);
        approach_dates.insert(sid, out.approach);
    }
    Ok(SyntheticStudy {
        panels,
        predictors,
        truth: GroundTruth { storms },
        counties,
        exposures,
        approach_dates,
    })
}

struct StormOut {
    panel: OutcomePanel,
    predictors: Vec<PredictorRow>,
    truth: StormTruth,
    counties: Vec<CountyRecord>,
    exposures: Vec<ExposureRecord>,
    approach: NaiveDate,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    if sd <= 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, sd).expect("positive sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn simulate_storm(cfg: &TruthConfig, s: usize, sid: &str, rng: &mut ChaCha8Rng) -> Result<StormOut> {
    let (n, t, k) = (cfg.n_units, cfg.n_periods, cfg.k_true);
    let t0 = t - 1;
    let n_treated = cfg.n_treated();
    let year = 1999 + (s % 17) as i32;
    let approach = NaiveDate::from_ymd_opt(year, 9, 1).expect("valid date") + Duration::days((s / 17) as i64);

    let params = McParams {
        alpha: cfg.alpha,
        gamma: normal_vec(rng, n, cfg.gamma_sd),
        psi: normal_vec(rng, t, cfg.psi_sd),
        u: normal_vec(rng, k * n, cfg.u_sd),
        v: normal_vec(rng, k * t, cfg.v_sd),
        eta: cfg.eta,
        k,
    };

    // county ids; the first n_treated of a random permutation are treated
    let ids: Vec<String> = (0..n).map(|i| format!("{sid}-C{i:03}")).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut is_treated = vec![false; n];
    for &i in &order[..n_treated] {
        is_treated[i] = true;
    }
    let log_lo = (cfg.population_min as f64).ln();
    let log_hi = (cfg.population_max as f64).ln();
    let pops: Vec<u64> = (0..n)
        .map(|_| {
            if log_hi > log_lo {
                rng.random_range(log_lo..log_hi).exp().round() as u64
            } else {
                cfg.population_min
            }
        })
        .collect();

    // features for everyone; controls get sub-gale windspeeds
    let vmax: Vec<f64> = (0..n)
        .map(|i| {
            if is_treated[i] {
                rng.random_range(GALE_FORCE_MS..65.0)
            } else {
                rng.random_range(2.0..GALE_FORCE_MS - 0.5)
            }
        })
        .collect();
    let treated_v: Vec<f64> = (0..n).filter(|&i| is_treated[i]).map(|i| vmax[i]).collect();
    let v_mean = treated_v.iter().sum::<f64>() / treated_v.len() as f64;
    let v_sd = (treated_v.iter().map(|v| (v - v_mean).powi(2)).sum::<f64>()
        / (treated_v.len().max(2) - 1) as f64)
        .sqrt()
        .max(1e-9);
    let rho: Vec<f64> = (0..n)
        .map(|i| match cfg.effect {
            EffectModel::Constant { rho } => rho,
            EffectModel::WindLinked { base, per_sd } => base * (per_sd * (vmax[i] - v_mean) / v_sd).exp(),
        })
        .collect();

    let mut y_obs = vec![vec![0u64; t]; n];
    let mut treated_truth = Vec::new();
    for i in 0..n {
        let log_p = (pops[i] as f64).ln();
        let mut y1 = Vec::new();
        let mut y0 = Vec::new();
        for tt in 0..t {
            let mu = (params.linear(i, tt) + log_p).exp();
            if is_treated[i] && tt >= t0 {
                let a = sample_nb(rho[i] * mu, cfg.eta, rng);
                let b = sample_nb(mu, cfg.eta, rng);
                y_obs[i][tt] = a;
                y1.push(a);
                y0.push(b);
            } else {
                y_obs[i][tt] = sample_nb(mu, cfg.eta, rng);
            }
        }
        if is_treated[i] {
            let iee = y1.iter().map(|&v| v as i64).sum::<i64>() - y0.iter().map(|&v| v as i64).sum::<i64>();
            treated_truth.push((i, rho[i], y1, y0, iee));
        }
    }

    // centroids: cluster around a storm-specific center
    let center = LatLon::new(30.0, -179.0 + 6.0 * (s % 59) as f64);
    let centroids: Vec<LatLon> = (0..n)
        .map(|_| {
            LatLon::new(
                center.lat + rng.random_range(-0.8..0.8),
                center.lon + rng.random_range(-0.8..0.8),
            )
        })
        .collect();

    // panel row order: controls then treated, each by id
    let mut rows: Vec<usize> = (0..n).filter(|&i| !is_treated[i]).collect();
    rows.extend((0..n).filter(|&i| is_treated[i]));
    let pos_of: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let panel = OutcomePanel::new(
        sid,
        rows.iter().map(|&i| ids[i].clone()).collect(),
        rows.iter().map(|&i| y_obs[i].clone()).collect(),
        rows.iter().map(|&i| vec![pops[i] as f64; t]).collect(),
        t0,
        (n - n_treated..n).collect(),
    )?;
    // parameters reindexed to panel rows
    let mut p_rows = params.clone();
    p_rows.gamma = rows.iter().map(|&i| params.gamma[i]).collect();
    p_rows.u = (0..k)
        .flat_map(|kk| rows.iter().map(move |&i| (kk, i)))
        .map(|(kk, i)| params.u[kk * n + i])
        .collect();

    let treated = treated_truth
        .into_iter()
        .map(|(i, rho, y1, y0, iee)| TreatedTruth {
            storm_id: sid.to_string(),
            county_id: ids[i].clone(),
            unit: pos_of[&i],
            rho,
            y1,
            y0,
            population: pops[i] as f64,
            iee,
            excess_rate: 100_000.0 * iee as f64 / pops[i] as f64,
        })
        .collect::<Vec<_>>();
    let mut treated = treated;
    treated.sort_by_key(|t| t.unit);

    // raw daily counts only make sense for the standard 10-window layout
    let mut counties = Vec::new();
    let mut exposures = Vec::new();
    for i in 0..n {
        let mut daily = BTreeMap::new();
        if t == N_WINDOWS {
            for (j, &count) in y_obs[i].iter().enumerate() {
                let (lo, hi) = window_offsets(j);
                let days = (hi - lo + 1) as usize;
                let mut per_day = vec![0u64; days];
                for _ in 0..count {
                    per_day[rng.random_range(0..days)] += 1;
                }
                for (d, c) in per_day.into_iter().enumerate() {
                    daily.insert(approach + Duration::days(lo + d as i64), c);
                }
            }
        }
        counties.push(CountyRecord {
            county_id: ids[i].clone(),
            centroid: centroids[i],
            population: pops[i],
            daily_counts: daily,
        });
        exposures.push(ExposureRecord {
            storm_id: sid.to_string(),
            county_id: ids[i].clone(),
            vmax_sust: vmax[i],
            sust_dur: if is_treated[i] { rng.random_range(0.0..2000.0) } else { 0.0 },
            precip: if year <= 2011 { Some(rng.random_range(0.0..300.0)) } else { None },
            closest_approach: approach + Duration::days(if is_treated[i] { rng.random_range(0..2) } else { 1 }),
            exposure_count: rng.random_range(1..20),
        });
    }
    // the panel anchor is the earliest treated approach
    let first = (0..n)
        .filter(|&i| is_treated[i])
        .map(|i| exposures[i].closest_approach)
        .min()
        .expect("at least one treated county");
    if first != approach {
        let shift = (first - approach).num_days();
        for c in counties.iter_mut() {
            c.daily_counts = std::mem::take(&mut c.daily_counts)
                .into_iter()
                .map(|(d, v)| (d + Duration::days(shift), v))
                .collect();
        }
    }

    let predictors = treated
        .iter()
        .map(|tr| {
            let orig = ids.iter().position(|id| *id == tr.county_id).expect("known id");
            let e = &exposures[orig];
            PredictorRow {
                storm_id: sid.to_string(),
                county_id: tr.county_id.clone(),
                vmax_sust: e.vmax_sust,
                sust_dur: e.sust_dur,
                year: year as f64,
                exposure: e.exposure_count as f64,
                poverty: rng.random_range(0.05..0.35),
                white_pct: rng.random_range(0.3..0.95),
                owner_occupied: rng.random_range(0.5..0.85),
                age_pct_65_plus: rng.random_range(0.1..0.3),
                median_age: rng.random_range(30.0..50.0),
                population_density: rng.random_range(3.0f64..8.0).exp(),
                median_house_value: rng.random_range(50_000.0..300_000.0),
                no_grad: rng.random_range(0.05..0.35),
                cc1: rng.random_bool(0.3),
                state: Some(STATES[rng.random_range(0..STATES.len())].to_string()),
                precip: e.precip,
            }
        })
        .collect();

    Ok(StormOut {
        panel,
        predictors,
        truth: StormTruth { storm_id: sid.to_string(), params: p_rows, treated },
        counties,
        exposures,
        approach: first,
    })
}

#[derive(Serialize)]
struct TruthRow<'a> {
    storm_id: &'a str,
    county_id: &'a str,
    unit: usize,
    rho: f64,
    population: f64,
    y1: u64,
    y0: u64,
    iee: i64,
    excess_rate: f64,
}

/// Centroid distance under which two synthetic counties count as adjacent.
pub const ADJACENT_MILES: f64 = 10.0;

/// County pairs whose centroids lie within `miles` of each other, each pair
/// once with the smaller id first.
pub fn proximity_adjacency(counties: &[CountyRecord], miles: f64) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (a, ca) in counties.iter().enumerate() {
        for cb in &counties[a + 1..] {
            if great_circle_miles(ca.centroid, cb.centroid)? < miles {
                let (x, y) = if ca.county_id < cb.county_id { (ca, cb) } else { (cb, ca) };
                out.push((x.county_id.clone(), y.county_id.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Write a study in the raw-input schemas (`counties.csv`, `counts.csv`,
/// `exposures.csv`) plus `predictors.csv`, `adjacency.csv` (see
/// [`proximity_adjacency`]), `ground_truth.csv` (one row per treated county,
/// post-start totals) and `ground_truth.json` (everything, including latent
/// parameters).
pub fn write_study(dir: &Path, study: &SyntheticStudy) -> Result<()> {
    write_raw_inputs(dir, &study.counties, &study.exposures)?;
    write_predictors(&dir.join("predictors.csv"), &study.predictors)?;
    let path = dir.join("adjacency.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["county_a", "county_b"])?;
    for (a, b) in proximity_adjacency(&study.counties, ADJACENT_MILES)? {
        w.write_record([a, b])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("ground_truth.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for t in study.truth.treated() {
        w.serialize(TruthRow {
            storm_id: &t.storm_id,
            county_id: &t.county_id,
            unit: t.unit,
            rho: t.rho,
            population: t.population,
            y1: t.y1.iter().sum(),
            y0: t.y0.iter().sum(),
            iee: t.iee,
            excess_rate: t.excess_rate,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("ground_truth.json");
    fs::write(&path, serde_json::to_string_pretty(&study.truth)?).map_err(|e| Error::io(&path, e))
}

/// Posterior summaries from brute-force integration of the intercept-only
/// model over `(alpha, log eta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPosterior {
    pub mean_alpha: f64,
    pub mean_log_eta: f64,
    pub mean_eta: f64,
    /// Posterior mean of `exp(alpha)`.
    pub mean_rate: f64,
    /// Posterior mean of the cell mean `exp(alpha) * p_it`, row-major.
    pub mu: Vec<f64>,
    pub boundary_mass: f64,
    pub resolution: usize,
    pub alpha_range: (f64, f64),
    pub log_eta_range: (f64, f64),
}

struct GridTerms {
    cells: Vec<(u64, f64)>,
    prior: Prior,
}

impl GridTerms {
    fn logp(&self, alpha: f64, log_eta: f64) -> f64 {
        let eta = log_eta.exp();
        if !(eta > 0.0) || !eta.is_finite() {
            return f64::NEG_INFINITY;
        }
        let mut lp: f64 = self
            .cells
            .iter()
            .map(|&(y, log_p)| nb_logpmf_log(y, alpha + log_p, eta))
            .sum();
        match self.prior {
            Prior::Flat => lp += log_eta,
            Prior::WeakGaussian { sd } => lp -= 0.5 * (alpha * alpha + log_eta * log_eta) / (sd * sd),
        }
        if lp.is_nan() { f64::NEG_INFINITY } else { lp }
    }
}

fn eval_grid(terms: &GridTerms, a: (f64, f64), e: (f64, f64), res: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let av: Vec<f64> = (0..res).map(|j| a.0 + (j as f64 + 0.5) * (a.1 - a.0) / res as f64).collect();
    let ev: Vec<f64> = (0..res).map(|j| e.0 + (j as f64 + 0.5) * (e.1 - e.0) / res as f64).collect();
    let mut lp = Vec::with_capacity(res * res);
    for &x in &av {
        for &y in &ev {
            lp.push(terms.logp(x, y));
        }
    }
    (av, ev, lp)
}

/// Posterior means for the intercept-only model by midpoint-rule
/// integration on an adaptively placed grid.
///
/// The box is widened until the outer ring carries less than `1e-6` of the
/// mass, then shrunk to the region holding non-negligible density and
/// re-evaluated at full resolution.
pub fn grid_posterior_k0(panel: &OutcomePanel, prior: Prior, resolution: usize) -> Result<GridPosterior> {
    let n_cells = panel.n_units() * panel.n_periods();
    if n_cells > 20 {
        return Err(Error::invalid(format!("grid oracle limited to N*T <= 20, got {n_cells}")));
    }
    if resolution < 20 {
        return Err(Error::invalid("grid resolution must be at least 20"));
    }
    let mut cells = Vec::new();
    let (mut ys, mut ps) = (0.0, 0.0);
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if !panel.d(i, t) {
                cells.push((panel.y(i, t), panel.offset(i, t).ln()));
                ys += panel.y(i, t) as f64;
                ps += panel.offset(i, t);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::invalid("panel has no untreated cells"));
    }
    let terms = GridTerms { cells, prior };
    let centre = ((ys.max(0.5)) / ps).ln();
    let mut a = (centre - 5.0, centre + 5.0);
    let mut e = (-5.0, 10.0);
    const BUDGET: usize = 40;
    const CUTOFF: f64 = 40.0;
    let coarse = 120;

    for _ in 0..BUDGET {
        let (av, ev, lp) = eval_grid(&terms, a, e, coarse);
        let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::GridNotConverged("density is -inf on the whole grid".into()));
        }
        let (mut amin, mut amax, mut emin, mut emax) = (usize::MAX, 0, usize::MAX, 0);
        for ia in 0..coarse {
            for ie in 0..coarse {
                if lp[ia * coarse + ie] > max - CUTOFF {
                    amin = amin.min(ia);
                    amax = amax.max(ia);
                    emin = emin.min(ie);
                    emax = emax.max(ie);
                }
            }
        }
        let (da, de) = ((a.1 - a.0) / coarse as f64, (e.1 - e.0) / coarse as f64);
        let mut grew = false;
        if amin == 0 {
            a.0 -= a.1 - a.0;
            grew = true;
        }
        if amax == coarse - 1 {
            a.1 += a.1 - a.0;
            grew = true;
        }
        if emin == 0 {
            e.0 -= e.1 - e.0;
            grew = true;
        }
        if emax == coarse - 1 {
            e.1 += e.1 - e.0;
            grew = true;
        }
        if grew {
            continue;
        }
        let shrink_a = (av[amin] - 2.0 * da, av[amax] + 2.0 * da);
        let shrink_e = (ev[emin] - 2.0 * de, ev[emax] + 2.0 * de);
        let ratio = ((shrink_a.1 - shrink_a.0) / (a.1 - a.0)).min((shrink_e.1 - shrink_e.0) / (e.1 - e.0));
        a = shrink_a;
        e = shrink_e;
        if ratio > 0.5 {
            return integrate(&terms, panel, a, e, resolution);
        }
    }
    Err(Error::GridNotConverged(format!(
        "box did not settle after {BUDGET} rounds: alpha {a:?}, log eta {e:?}"
    )))
}

fn integrate(
    terms: &GridTerms,
    panel: &OutcomePanel,
    a: (f64, f64),
    e: (f64, f64),
    res: usize,
) -> Result<GridPosterior> {
    let (av, ev, lp) = eval_grid(terms, a, e, res);
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s_alpha, mut s_leta, mut s_eta, mut s_rate, mut ring) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for ia in 0..res {
        for ie in 0..res {
            let w = (lp[ia * res + ie] - max).exp();
            z += w;
            s_alpha += w * av[ia];
            s_leta += w * ev[ie];
            s_eta += w * ev[ie].exp();
            s_rate += w * av[ia].exp();
            if ia == 0 || ie == 0 || ia == res - 1 || ie == res - 1 {
                ring += w;
            }
        }
    }
    let boundary_mass = ring / z;
    if boundary_mass >= 1e-6 {
        return Err(Error::GridNotConverged(format!("boundary mass {boundary_mass:e}")));
    }
    let mean_rate = s_rate / z;
    let mu = (0..panel.n_units())
        .flat_map(|i| (0..panel.n_periods()).map(move |t| (i, t)))
        .map(|(i, t)| mean_rate * panel.offset(i, t))
        .collect();
    Ok(GridPosterior {
        mean_alpha: s_alpha / z,
        mean_log_eta: s_leta / z,
        mean_eta: s_eta / z,
        mean_rate,
        mu,
        boundary_mass,
        resolution: res,
        alpha_range: a,
        log_eta_range: e,
    })
}
