//! Per-storm panel construction.
//!
//! Raw daily counts, population denominators and exposure records are turned
//! into one `OutcomePanel` per storm: an N×T matrix of 14-day cumulative
//! counts, constant population offsets, and an absorbing treatment mask whose
//! treated cells are the final column of treated rows.

mod io;

pub use io::{
    read_counties, read_counts, read_exposures, read_panel, read_panel_dir, write_panel, write_panel_dir,
    write_raw_inputs, PanelSidecar,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gale-force threshold on maximum sustained wind at the centroid, m/s.
pub const GALE_FORCE_MS: f64 = 17.4;
/// Mean Earth radius used for centroid distances, statute miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.8;
pub const DEFAULT_CONTROL_RADIUS_MILES: f64 = 150.0;

/// Number of 14-day windows in a panel.
pub const N_WINDOWS: usize = 10;
pub const WINDOW_DAYS: i64 = 14;
/// Offset (days relative to first approach) of the last day in the panel.
pub const LAST_OFFSET: i64 = 11;
/// Offset of the first day: 10 windows of 14 days ending at +11.
pub const FIRST_OFFSET: i64 = LAST_OFFSET - (N_WINDOWS as i64) * WINDOW_DAYS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyRecord {
    pub county_id: String,
    pub centroid: LatLon,
    /// Annual denominator used as the offset in every window.
    pub population: u64,
    pub daily_counts: BTreeMap<NaiveDate, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRecord {
    pub storm_id: String,
    pub county_id: String,
    pub vmax_sust: f64,
    pub sust_dur: f64,
    pub precip: Option<f64>,
    pub closest_approach: NaiveDate,
    pub exposure_count: u32,
}

/// N×T count panel for one storm.
///
/// Treatment is absorbing with a common start column: `D_it = 1` iff row `i`
/// is in `treated` and `t >= t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePanel {
    pub storm_id: String,
    pub unit_ids: Vec<String>,
    n_periods: usize,
    /// Row-major N×T counts.
    counts: Vec<u64>,
    /// Row-major N×T positive offsets.
    offsets: Vec<f64>,
    t0: usize,
    treated: Vec<usize>,
    treated_flag: Vec<bool>,
}

impl OutcomePanel {
    /// Assemble and validate a panel. `counts` and `offsets` are given per row.
    pub fn new(
        storm_id: impl Into<String>,
        unit_ids: Vec<String>,
        counts: Vec<Vec<u64>>,
        offsets: Vec<Vec<f64>>,
        t0: usize,
        treated: Vec<usize>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        if n == 0 {
            return Err(Error::invalid("panel has no units"));
        }
        if counts.len() != n || offsets.len() != n {
            return Err(Error::invalid(format!(
                "panel row count mismatch: {} units, {} count rows, {} offset rows",
                n,
                counts.len(),
                offsets.len()
            )));
        }
        let t = counts[0].len();
        if t == 0 {
            return Err(Error::invalid("panel has no periods"));
        }
        if counts.iter().any(|r| r.len() != t) || offsets.iter().any(|r| r.len() != t) {
            return Err(Error::invalid("ragged panel rows"));
        }
        if t0 >= t {
            return Err(Error::invalid(format!(
                "treatment start column {t0} outside 0..{t}"
            )));
        }
        if let Some(bad) = offsets.iter().flatten().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::invalid(format!("non-positive offset {bad}")));
        }
        let mut flag = vec![false; n];
        for &w in &treated {
            if w >= n {
                return Err(Error::invalid(format!("treated index {w} out of range")));
            }
            if flag[w] {
                return Err(Error::invalid(format!("treated index {w} repeated")));
            }
            flag[w] = true;
        }
        let mut treated = treated;
        treated.sort_unstable();
        Ok(OutcomePanel {
            storm_id: storm_id.into(),
            unit_ids,
            n_periods: t,
            counts: counts.into_iter().flatten().collect(),
            offsets: offsets.into_iter().flatten().collect(),
            t0,
            treated,
            treated_flag: flag,
        })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// First treated column (0-based).
    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Sorted indices of treated rows.
    pub fn treated(&self) -> &[usize] {
        &self.treated
    }

    pub fn controls(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| !self.is_treated_unit(i)).collect()
    }

    pub fn is_treated_unit(&self, i: usize) -> bool {
        self.treated_flag[i]
    }

    pub fn y(&self, i: usize, t: usize) -> u64 {
        self.counts[i * self.n_periods + t]
    }

    pub fn offset(&self, i: usize, t: usize) -> f64 {
        self.offsets[i * self.n_periods + t]
    }

    /// Treatment indicator `D_it`.
    pub fn d(&self, i: usize, t: usize) -> bool {
        self.treated_flag[i] && t >= self.t0
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.n_periods..(i + 1) * self.n_periods]
    }

    /// Population at the final period, `p_iT`.
    pub fn population(&self, i: usize) -> f64 {
        self.offset(i, self.n_periods - 1)
    }

    /// Treated post-start cells `(i, t)` in row-major order.
    pub fn masked_cells(&self) -> Vec<(usize, usize)> {
        self.treated
            .iter()
            .flat_map(|&i| (self.t0..self.n_periods).map(move |t| (i, t)))
            .collect()
    }

    /// Overwrite a cell count. Used for perturbation experiments.
    pub fn set_y(&mut self, i: usize, t: usize, value: u64) {
        self.counts[i * self.n_periods + t] = value;
    }

    /// Keep only the listed rows, preserving order and treatment status.
    pub fn select_rows(&self, keep: &[usize]) -> Result<OutcomePanel> {
        let unit_ids = keep.iter().map(|&i| self.unit_ids[i].clone()).collect();
        let counts = keep.iter().map(|&i| self.row(i).to_vec()).collect();
        let offsets = keep
            .iter()
            .map(|&i| (0..self.n_periods).map(|t| self.offset(i, t)).collect())
            .collect();
        let treated = keep
            .iter()
            .enumerate()
            .filter(|(_, &i)| self.is_treated_unit(i))
            .map(|(new, _)| new)
            .collect();
        OutcomePanel::new(
            self.storm_id.clone(),
            unit_ids,
            counts,
            offsets,
            self.t0,
            treated,
        )
    }
}

pub fn classify_treated(vmax_sust: f64, threshold: f64) -> Result<bool> {
    if !vmax_sust.is_finite() || !threshold.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite windspeed {vmax_sust} or threshold {threshold}"
        )));
    }
    if vmax_sust < 0.0 {
        return Err(Error::invalid(format!("negative windspeed {vmax_sust}")));
    }
    Ok(vmax_sust >= threshold)
}

/// Haversine distance in miles.
pub fn great_circle_miles(a: LatLon, b: LatLon) -> Result<f64> {
    for p in [a, b] {
        if !(p.lat.is_finite() && p.lon.is_finite())
            || p.lat.abs() > 90.0
            || p.lon.abs() > 180.0
        {
            return Err(Error::invalid(format!(
                "coordinate out of range: ({}, {})",
                p.lat, p.lon
            )));
        }
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin())
}

/// Candidates within `radius_miles` (inclusive) of the nearest treated centroid.
///
/// The result is sorted by county id, so it does not depend on input order.
pub fn select_controls(
    treated: &[(String, LatLon)],
    candidates: &[(String, LatLon)],
    radius_miles: f64,
) -> Result<Vec<String>> {
    if !(radius_miles > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius_miles}")));
    }
    let treated_ids: BTreeSet<&str> = treated.iter().map(|(id, _)| id.as_str()).collect();
    let mut out = BTreeSet::new();
    for (id, c) in candidates {
        if treated_ids.contains(id.as_str()) {
            return Err(Error::invalid(format!("county {id} is both treated and candidate")));
        }
        let mut nearest = f64::INFINITY;
        for (_, t) in treated {
            nearest = nearest.min(great_circle_miles(*c, *t)?);
        }
        if nearest <= radius_miles {
            out.insert(id.clone());
        }
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InclusionThresholds {
    /// Counties with population below this are dropped.
    pub min_population: u64,
    /// Counties with this many or fewer events of any outcome are dropped.
    pub min_events: u64,
    /// Storms with fewer analytic counties than this are dropped.
    pub min_total: usize,
    /// Storms with fewer analytic controls than this are dropped.
    pub min_controls: usize,
}

impl Default for InclusionThresholds {
    fn default() -> Self {
        InclusionThresholds {
            min_population: 100,
            min_events: 5,
            min_total: 20,
            min_controls: 5,
        }
    }
}

/// A county in a draft panel with its per-outcome event totals over the
/// study window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftUnit {
    pub county_id: String,
    pub population: u64,
    pub event_totals: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftPanel {
    pub storm_id: String,
    pub treated: Vec<DraftUnit>,
    pub controls: Vec<DraftUnit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ExclusionRule {
    PopulationBelow { min: u64, population: u64 },
    TooFewEvents { outcome: String, count: u64, max_excluded: u64 },
    NoTreated,
    TotalBelow { min: usize, total: usize },
    ControlsBelow { min: usize, controls: usize },
}

impl std::fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExclusionRule::PopulationBelow { min, .. } => write!(f, "population < {min}"),
            ExclusionRule::TooFewEvents { outcome, max_excluded, .. } => {
                write!(f, "{outcome} events <= {max_excluded}")
            }
            ExclusionRule::NoTreated => write!(f, "no treated counties"),
            ExclusionRule::TotalBelow { min, .. } => write!(f, "total counties < {min}"),
            ExclusionRule::ControlsBelow { min, .. } => write!(f, "control counties < {min}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub storm_id: String,
    /// `None` for storm-level exclusions.
    pub county_id: Option<String>,
    #[serde(flatten)]
    pub rule: ExclusionRule,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub entries: Vec<Exclusion>,
}

impl ExclusionReport {
    pub fn for_storm<'a>(&'a self, storm_id: &'a str) -> impl Iterator<Item = &'a Exclusion> + 'a {
        self.entries.iter().filter(move |e| e.storm_id == storm_id)
    }

    fn push(&mut self, storm_id: &str, county_id: Option<&str>, rule: ExclusionRule) {
        self.entries.push(Exclusion {
            storm_id: storm_id.to_string(),
            county_id: county_id.map(str::to_string),
            description: rule.to_string(),
            rule,
        });
    }
}

fn county_failure(unit: &DraftUnit, th: &InclusionThresholds) -> Option<ExclusionRule> {
    if unit.population < th.min_population {
        return Some(ExclusionRule::PopulationBelow {
            min: th.min_population,
            population: unit.population,
        });
    }
    unit.event_totals
        .iter()
        .find(|(_, &c)| c <= th.min_events)
        .map(|(o, &c)| ExclusionRule::TooFewEvents {
            outcome: o.clone(),
            count: c,
            max_excluded: th.min_events,
        })
}

/// Apply county-level then storm-level inclusion rules.
pub fn apply_inclusion_criteria(
    panels: Vec<DraftPanel>,
    th: &InclusionThresholds,
) -> (Vec<DraftPanel>, ExclusionReport) {
    let mut report = ExclusionReport::default();
    let mut kept = Vec::new();
    for mut draft in panels {
        let storm = draft.storm_id.clone();
        let filter = |units: Vec<DraftUnit>, report: &mut ExclusionReport| -> Vec<DraftUnit> {
            units
                .into_iter()
                .filter(|u| match county_failure(u, th) {
                    Some(rule) => {
                        report.push(&storm, Some(&u.county_id), rule);
                        false
                    }
                    None => true,
                })
                .collect()
        };
        draft.treated = filter(std::mem::take(&mut draft.treated), &mut report);
        draft.controls = filter(std::mem::take(&mut draft.controls), &mut report);

        let total = draft.treated.len() + draft.controls.len();
        let storm_rule = if draft.treated.is_empty() {
            Some(ExclusionRule::NoTreated)
        } else if total < th.min_total {
            Some(ExclusionRule::TotalBelow { min: th.min_total, total })
        } else if draft.controls.len() < th.min_controls {
            Some(ExclusionRule::ControlsBelow {
                min: th.min_controls,
                controls: draft.controls.len(),
            })
        } else {
            None
        };
        match storm_rule {
            Some(rule) => report.push(&storm, None, rule),
            None => kept.push(draft),
        }
    }
    (kept, report)
}

/// Check an emitted panel against the inclusion thresholds using only the
/// panel's own contents. Returns the first violated rule.
pub fn check_panel_inclusion(
    panel: &OutcomePanel,
    th: &InclusionThresholds,
) -> Option<ExclusionRule> {
    let controls = panel.n_units() - panel.treated().len();
    if panel.treated().is_empty() {
        return Some(ExclusionRule::NoTreated);
    }
    if panel.n_units() < th.min_total {
        return Some(ExclusionRule::TotalBelow { min: th.min_total, total: panel.n_units() });
    }
    if controls < th.min_controls {
        return Some(ExclusionRule::ControlsBelow { min: th.min_controls, controls });
    }
    for i in 0..panel.n_units() {
        let total: u64 = panel.row(i).iter().sum();
        if total <= th.min_events {
            return Some(ExclusionRule::TooFewEvents {
                outcome: "panel".into(),
                count: total,
                max_excluded: th.min_events,
            });
        }
        if (panel.population(i) as u64) < th.min_population {
            return Some(ExclusionRule::PopulationBelow {
                min: th.min_population,
                population: panel.population(i) as u64,
            });
        }
    }
    None
}

/// Inclusive day-offset range covered by window `j` (0-based).
pub fn window_offsets(j: usize) -> (i64, i64) {
    let back = WINDOW_DAYS * (N_WINDOWS as i64 - 1 - j as i64);
    (-2 - back, LAST_OFFSET - back)
}

fn window_dates(approach: NaiveDate, j: usize) -> (NaiveDate, NaiveDate) {
    let (a, b) = window_offsets(j);
    (approach + Duration::days(a), approach + Duration::days(b))
}

/// Sum of daily counts over `[from, to]`, failing on the first run of
/// missing dates.
fn window_sum(rec: &CountyRecord, from: NaiveDate, to: NaiveDate) -> Result<u64> {
    let mut total = 0u64;
    let mut day = from;
    while day <= to {
        match rec.daily_counts.get(&day) {
            Some(c) => total += c,
            None => {
                let mut end = day;
                while end < to && !rec.daily_counts.contains_key(&(end + Duration::days(1))) {
                    end += Duration::days(1);
                }
                return Err(Error::DataGap {
                    county: rec.county_id.clone(),
                    from: day,
                    to: end,
                });
            }
        }
        day += Duration::days(1);
    }
    Ok(total)
}

/// Total events over the full 140-day study window.
pub fn study_window_total(rec: &CountyRecord, approach_date: NaiveDate) -> Result<u64> {
    window_sum(
        rec,
        approach_date + Duration::days(FIRST_OFFSET),
        approach_date + Duration::days(LAST_OFFSET),
    )
}

/// Build the 10-window panel for one storm.
///
/// Rows follow `records` order. A row is treated when its exposure record for
/// `storm_id` classifies as treated at the gale-force threshold.
pub fn build_outcome_panel(
    records: &[CountyRecord],
    exposure: &[ExposureRecord],
    storm_id: &str,
    approach_date: NaiveDate,
) -> Result<OutcomePanel> {
    build_outcome_panel_with_threshold(records, exposure, storm_id, approach_date, GALE_FORCE_MS)
}

pub fn build_outcome_panel_with_threshold(
    records: &[CountyRecord],
    exposure: &[ExposureRecord],
    storm_id: &str,
    approach_date: NaiveDate,
    threshold: f64,
) -> Result<OutcomePanel> {
    let vmax: HashMap<&str, f64> = exposure
        .iter()
        .filter(|e| e.storm_id == storm_id)
        .map(|e| (e.county_id.as_str(), e.vmax_sust))
        .collect();
    let mut unit_ids = Vec::with_capacity(records.len());
    let mut counts = Vec::with_capacity(records.len());
    let mut offsets = Vec::with_capacity(records.len());
    let mut treated = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.population == 0 {
            return Err(Error::invalid(format!("county {} has zero population", rec.county_id)));
        }
        let row = (0..N_WINDOWS)
            .map(|j| {
                let (a, b) = window_dates(approach_date, j);
                window_sum(rec, a, b)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(&v) = vmax.get(rec.county_id.as_str()) {
            if classify_treated(v, threshold)? {
                treated.push(i);
            }
        }
        unit_ids.push(rec.county_id.clone());
        counts.push(row);
        offsets.push(vec![rec.population as f64; N_WINDOWS]);
    }
    OutcomePanel::new(storm_id, unit_ids, counts, offsets, N_WINDOWS - 1, treated)
}

/// Storm-level settings for turning raw inputs into analytic panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelBuildConfig {
    pub outcome: String,
    pub threshold_ms: f64,
    pub radius_miles: f64,
    pub inclusion: InclusionThresholds,
}

impl Default for PanelBuildConfig {
    fn default() -> Self {
        PanelBuildConfig {
            outcome: "deaths".into(),
            threshold_ms: GALE_FORCE_MS,
            radius_miles: DEFAULT_CONTROL_RADIUS_MILES,
            inclusion: InclusionThresholds::default(),
        }
    }
}

/// Result of turning raw inputs into analytic panels.
#[derive(Debug, Clone)]
pub struct BuiltPanels {
    pub panels: Vec<OutcomePanel>,
    pub report: ExclusionReport,
    pub approach_dates: BTreeMap<String, NaiveDate>,
}

/// Full panel workflow for every storm in `exposures`: classification,
/// control selection, inclusion rules and window aggregation.
///
/// Counties absent from a storm's exposure records are control candidates for
/// that storm. The first approach date is the earliest closest-approach date
/// among the storm's treated counties.
pub fn build_all_panels(
    counties: &[CountyRecord],
    exposures: &[ExposureRecord],
    cfg: &PanelBuildConfig,
) -> Result<BuiltPanels> {
    let by_id: BTreeMap<&str, &CountyRecord> =
        counties.iter().map(|c| (c.county_id.as_str(), c)).collect();
    let mut storms: BTreeMap<&str, Vec<&ExposureRecord>> = BTreeMap::new();
    for e in exposures {
        storms.entry(e.storm_id.as_str()).or_default().push(e);
    }

    let mut drafts = Vec::new();
    let mut approach_dates = BTreeMap::new();
    let mut report = ExclusionReport::default();
    for (storm, recs) in &storms {
        let mut treated_ids = BTreeSet::new();
        let mut approach: Option<NaiveDate> = None;
        for e in recs {
            if classify_treated(e.vmax_sust, cfg.threshold_ms)? {
                if !by_id.contains_key(e.county_id.as_str()) {
                    return Err(Error::invalid(format!(
                        "exposure for unknown county {} in storm {}",
                        e.county_id, storm
                    )));
                }
                treated_ids.insert(e.county_id.as_str());
                approach = Some(approach.map_or(e.closest_approach, |a| a.min(e.closest_approach)));
            }
        }
        let Some(approach) = approach else {
            report.push(storm, None, ExclusionRule::NoTreated);
            continue;
        };
        approach_dates.insert(storm.to_string(), approach);
        let treated: Vec<(String, LatLon)> = treated_ids
            .iter()
            .map(|id| (id.to_string(), by_id[id].centroid))
            .collect();
        let candidates: Vec<(String, LatLon)> = counties
            .iter()
            .filter(|c| !treated_ids.contains(c.county_id.as_str()))
            .map(|c| (c.county_id.clone(), c.centroid))
            .collect();
        let controls = select_controls(&treated, &candidates, cfg.radius_miles)?;
        let draft_unit = |id: &str| -> Result<DraftUnit> {
            let rec = by_id[id];
            let mut totals = BTreeMap::new();
            totals.insert(cfg.outcome.clone(), study_window_total(rec, approach)?);
            Ok(DraftUnit {
                county_id: id.to_string(),
                population: rec.population,
                event_totals: totals,
            })
        };
        drafts.push(DraftPanel {
            storm_id: storm.to_string(),
            treated: treated_ids.iter().map(|id| draft_unit(id)).collect::<Result<_>>()?,
            controls: controls.iter().map(|id| draft_unit(id)).collect::<Result<_>>()?,
        });
    }

    let (kept, inclusion_report) = apply_inclusion_criteria(drafts, &cfg.inclusion);
    report.entries.extend(inclusion_report.entries);

    let mut panels = Vec::with_capacity(kept.len());
    for draft in kept {
        let records: Vec<CountyRecord> = draft
            .controls
            .iter()
            .chain(&draft.treated)
            .map(|u| by_id[u.county_id.as_str()].clone())
            .collect();
        let storm_exposures: Vec<ExposureRecord> = exposures
            .iter()
            .filter(|e| e.storm_id == draft.storm_id)
            .cloned()
            .collect();
        panels.push(build_outcome_panel_with_threshold(
            &records,
            &storm_exposures,
            &draft.storm_id,
            approach_dates[&draft.storm_id],
            cfg.threshold_ms,
        )?);
    }
    Ok(BuiltPanels { panels, report, approach_dates })
}
