use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{
    window_offsets, BuiltPanels, CountyRecord, Exclusion, ExclusionReport, ExposureRecord, LatLon, OutcomePanel,
};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize, Serialize)]
struct CountyRow {
    county_id: String,
    lat: f64,
    lon: f64,
    population: u64,
}

#[derive(Debug, Deserialize, Serialize)]
struct CountRow {
    county_id: String,
    date: NaiveDate,
    count: u64,
}

#[derive(Debug, Deserialize, Serialize)]
struct ExposureRow {
    storm_id: String,
    county_id: String,
    vmax_sust: f64,
    sust_dur: f64,
    precip: Option<f64>,
    closest_approach: NaiveDate,
    exposure_count: u32,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

/// Read `counties.csv` and `counts.csv` into county records.
///
/// Every county must have a contiguous run of dates; counts for unknown
/// counties are rejected.
pub fn read_counties(counties_csv: &Path, counts_csv: &Path) -> Result<Vec<CountyRecord>> {
    let mut out = Vec::new();
    let mut index = BTreeMap::new();
    for row in reader(counties_csv)?.deserialize::<CountyRow>() {
        let row = row?;
        if row.population == 0 {
            return Err(Error::invalid(format!("county {} has zero population", row.county_id)));
        }
        if index.insert(row.county_id.clone(), out.len()).is_some() {
            return Err(Error::invalid(format!("duplicate county {}", row.county_id)));
        }
        out.push(CountyRecord {
            county_id: row.county_id,
            centroid: LatLon::new(row.lat, row.lon),
            population: row.population,
            daily_counts: BTreeMap::new(),
        });
    }
    for (county_id, counts) in read_counts(counts_csv)? {
        let &i = index
            .get(&county_id)
            .ok_or_else(|| Error::invalid(format!("counts for unknown county {county_id}")))?;
        out[i].daily_counts = counts;
    }
    for rec in &out {
        if let (Some((&first, _)), Some((&last, _))) =
            (rec.daily_counts.first_key_value(), rec.daily_counts.last_key_value())
        {
            let span = (last - first).num_days() + 1;
            if span as usize != rec.daily_counts.len() {
                let mut prev = first;
                for &d in rec.daily_counts.keys().skip(1) {
                    if d != prev + Duration::days(1) {
                        return Err(Error::DataGap {
                            county: rec.county_id.clone(),
                            from: prev + Duration::days(1),
                            to: d - Duration::days(1),
                        });
                    }
                    prev = d;
                }
            }
        }
    }
    Ok(out)
}

/// Read `counts.csv` grouped by county.
pub fn read_counts(path: &Path) -> Result<BTreeMap<String, BTreeMap<NaiveDate, u64>>> {
    let mut out: BTreeMap<String, BTreeMap<NaiveDate, u64>> = BTreeMap::new();
    for row in reader(path)?.deserialize::<CountRow>() {
        let row = row?;
        if out.entry(row.county_id.clone()).or_default().insert(row.date, row.count).is_some() {
            return Err(Error::invalid(format!(
                "duplicate count for {} on {}",
                row.county_id, row.date
            )));
        }
    }
    Ok(out)
}

pub fn read_exposures(path: &Path) -> Result<Vec<ExposureRecord>> {
    let mut out = Vec::new();
    for row in reader(path)?.deserialize::<ExposureRow>() {
        let r = row?;
        if !r.vmax_sust.is_finite() || r.vmax_sust < 0.0 {
            return Err(Error::invalid(format!(
                "bad vmax_sust {} for {}/{}",
                r.vmax_sust, r.storm_id, r.county_id
            )));
        }
        if r.precip.is_some_and(|p| !(p >= 0.0)) {
            return Err(Error::invalid(format!("negative precip for {}/{}", r.storm_id, r.county_id)));
        }
        out.push(ExposureRecord {
            storm_id: r.storm_id,
            county_id: r.county_id,
            vmax_sust: r.vmax_sust,
            sust_dur: r.sust_dur,
            precip: r.precip,
            closest_approach: r.closest_approach,
            exposure_count: r.exposure_count,
        });
    }
    Ok(out)
}

/// JSON sidecar written next to each panel CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PanelSidecar {
    pub storm_id: String,
    pub unit_ids: Vec<String>,
    pub n_periods: usize,
    /// First treated column, 0-based.
    pub t0: usize,
    /// Treated row indices.
    pub treated: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach_date: Option<NaiveDate>,
    /// Inclusive date range of each window, when the approach date is known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<(NaiveDate, NaiveDate)>,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelCell {
    unit_id: String,
    t: usize,
    count: u64,
    population: f64,
    treated: u8,
}

fn panel_paths(dir: &Path, storm_id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("panel_{storm_id}.csv")),
        dir.join(format!("panel_{storm_id}.json")),
    )
}

/// Write `panel_<storm>.csv` (long format) and `panel_<storm>.json`.
pub fn write_panel(
    dir: &Path,
    panel: &OutcomePanel,
    approach_date: Option<NaiveDate>,
    exclusions: Vec<Exclusion>,
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (csv_path, json_path) = panel_paths(dir, &panel.storm_id);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            w.serialize(PanelCell {
                unit_id: panel.unit_ids[i].clone(),
                t,
                count: panel.y(i, t),
                population: panel.offset(i, t),
                treated: panel.d(i, t) as u8,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let windows = match approach_date {
        Some(a) if panel.n_periods() == super::N_WINDOWS => (0..super::N_WINDOWS)
            .map(|j| {
                let (lo, hi) = window_offsets(j);
                (a + Duration::days(lo), a + Duration::days(hi))
            })
            .collect(),
        _ => Vec::new(),
    };
    let sidecar = PanelSidecar {
        storm_id: panel.storm_id.clone(),
        unit_ids: panel.unit_ids.clone(),
        n_periods: panel.n_periods(),
        t0: panel.t0(),
        treated: panel.treated().to_vec(),
        approach_date,
        windows,
        exclusions,
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Read a panel back from its CSV and JSON sidecar. The sidecar's treatment
/// layout must agree with the CSV's `treated` column.
pub fn read_panel(csv_path: &Path, json_path: &Path) -> Result<(OutcomePanel, PanelSidecar)> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: PanelSidecar = serde_json::from_str(&text)?;
    let n = sidecar.unit_ids.len();
    let t = sidecar.n_periods;
    let index: BTreeMap<&str, usize> = sidecar
        .unit_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut counts = vec![vec![None; t]; n];
    let mut offsets = vec![vec![0.0; t]; n];
    let mut flags = vec![vec![false; t]; n];
    for cell in reader(csv_path)?.deserialize::<PanelCell>() {
        let cell = cell?;
        let &i = index
            .get(cell.unit_id.as_str())
            .ok_or_else(|| Error::invalid(format!("panel cell for unknown unit {}", cell.unit_id)))?;
        if cell.t >= t {
            return Err(Error::invalid(format!("panel period {} out of range", cell.t)));
        }
        counts[i][cell.t] = Some(cell.count);
        offsets[i][cell.t] = cell.population;
        flags[i][cell.t] = cell.treated != 0;
    }
    let counts = counts
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .collect::<Option<Vec<u64>>>()
                .ok_or_else(|| Error::invalid(format!("missing cells for unit {}", sidecar.unit_ids[i])))
        })
        .collect::<Result<Vec<_>>>()?;
    let panel = OutcomePanel::new(
        sidecar.storm_id.clone(),
        sidecar.unit_ids.clone(),
        counts,
        offsets,
        sidecar.t0,
        sidecar.treated.clone(),
    )?;
    for (i, row) in flags.iter().enumerate() {
        for (tt, &f) in row.iter().enumerate() {
            if f != panel.d(i, tt) {
                return Err(Error::invalid(format!(
                    "treatment column disagrees with sidecar at ({}, {tt})",
                    sidecar.unit_ids[i]
                )));
            }
        }
    }
    Ok((panel, sidecar))
}

/// Write the raw-input CSV schemas (`counties.csv`, `counts.csv`,
/// `exposures.csv`) into `dir`.
pub fn write_raw_inputs(
    dir: &Path,
    counties: &[CountyRecord],
    exposures: &[ExposureRecord],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("counties.csv"))?;
    for c in counties {
        w.serialize(CountyRow {
            county_id: c.county_id.clone(),
            lat: c.centroid.lat,
            lon: c.centroid.lon,
            population: c.population,
        })?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("counts.csv"))?;
    for c in counties {
        for (&date, &count) in &c.daily_counts {
            w.serialize(CountRow { county_id: c.county_id.clone(), date, count })?;
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("exposures.csv"))?;
    for e in exposures {
        w.serialize(ExposureRow {
            storm_id: e.storm_id.clone(),
            county_id: e.county_id.clone(),
            vmax_sust: e.vmax_sust,
            sust_dur: e.sust_dur,
            precip: e.precip,
            closest_approach: e.closest_approach,
            exposure_count: e.exposure_count,
        })?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Write every panel of `built` under `dir`, plus `exclusions.json`.
pub fn write_panel_dir(dir: &Path, built: &BuiltPanels) -> Result<()> {
    for p in &built.panels {
        let excl = built.report.for_storm(&p.storm_id).cloned().collect();
        write_panel(dir, p, built.approach_dates.get(&p.storm_id).copied(), excl)?;
    }
    let path = dir.join("exclusions.json");
    fs::write(&path, serde_json::to_string_pretty(&built.report)?).map_err(|e| Error::io(&path, e))
}

/// Read every `panel_<storm>.csv`/`.json` pair under `dir`, ordered by storm
/// id, along with `exclusions.json` when present.
pub fn read_panel_dir(dir: &Path) -> Result<BuiltPanels> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("panel_") && name.ends_with(".json")
        })
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(Error::invalid(format!("no panel files in {}", dir.display())));
    }
    let mut out = BuiltPanels { panels: Vec::new(), report: ExclusionReport::default(), approach_dates: BTreeMap::new() };
    for json in sidecars {
        let (panel, side) = read_panel(&json.with_extension("csv"), &json)?;
        if let Some(d) = side.approach_date {
            out.approach_dates.insert(panel.storm_id.clone(), d);
        }
        out.panels.push(panel);
    }
    let excl = dir.join("exclusions.json");
    if excl.exists() {
        let text = fs::read_to_string(&excl).map_err(|e| Error::io(&excl, e))?;
        out.report = serde_json::from_str(&text)?;
    }
    Ok(out)
}
