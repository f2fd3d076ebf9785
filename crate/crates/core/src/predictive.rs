//! Draw-matched Bayesian linear regression of county excess rates on storm
//! and community features, plus prediction and cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{summarize, EffectDraws, PosteriorSummary};
use crate::seed::derive_seed;
use crate::spline::{quantile_knots, quantile_sorted, rcs_basis, SplineSpec};

/// Windspeed above which an exposure counts as hurricane-force.
pub const HURRICANE_MS: f64 = 33.0;

const SOCIO: [&str; 8] = [
    "poverty",
    "white_pct",
    "owner_occupied",
    "age_pct_65_plus",
    "median_age",
    "population_density",
    "median_house_value",
    "no_grad",
];
const FRACTIONS: [&str; 5] = ["poverty", "white_pct", "owner_occupied", "age_pct_65_plus", "no_grad"];

/// Features of one treated county for one storm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRow {
    pub storm_id: String,
    pub county_id: String,
    pub vmax_sust: f64,
    pub sust_dur: f64,
    pub year: f64,
    pub exposure: f64,
    pub poverty: f64,
    pub white_pct: f64,
    pub owner_occupied: f64,
    pub age_pct_65_plus: f64,
    pub median_age: f64,
    pub population_density: f64,
    pub median_house_value: f64,
    pub no_grad: f64,
    pub cc1: bool,
    pub state: Option<String>,
    pub precip: Option<f64>,
}

impl PredictorRow {
    /// Numeric feature by name; `None` for unknown names or absent values.
    pub fn value(&self, name: &str) -> Option<f64> {
        Some(match name {
            "vmax_sust" => self.vmax_sust,
            "sust_dur" => self.sust_dur,
            "year" => self.year,
            "exposure" => self.exposure,
            "poverty" => self.poverty,
            "white_pct" => self.white_pct,
            "owner_occupied" => self.owner_occupied,
            "age_pct_65_plus" => self.age_pct_65_plus,
            "median_age" => self.median_age,
            "population_density" => self.population_density,
            "median_house_value" => self.median_house_value,
            "no_grad" => self.no_grad,
            "cc1" => f64::from(u8::from(self.cc1)),
            "precip" => return self.precip,
            _ => return None,
        })
    }

    /// Overwrite a numeric feature by name.
    pub fn set_value(&mut self, name: &str, v: f64) -> Result<()> {
        match name {
            "vmax_sust" => self.vmax_sust = v,
            "poverty" => self.poverty = v,
            "white_pct" => self.white_pct = v,
            "owner_occupied" => self.owner_occupied = v,
            "age_pct_65_plus" => self.age_pct_65_plus = v,
            "no_grad" => self.no_grad = v,
            "sust_dur" => self.sust_dur = v,
            "year" => self.year = v,
            "exposure" => self.exposure = v,
            "precip" => self.precip = Some(v),
            "median_age" => self.median_age = v,
            "population_density" => self.population_density = v,
            "median_house_value" => self.median_house_value = v,
            _ => return Err(Error::invalid(format!("cannot sweep {name}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for f in FRACTIONS {
            let v = self.value(f).expect("known field");
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{} / {}: {f} = {v} is not a fraction",
                    self.storm_id, self.county_id
                )));
            }
        }
        let all = ["vmax_sust", "sust_dur", "year", "exposure", "median_age", "population_density", "median_house_value"];
        if all.iter().any(|f| !self.value(f).expect("known field").is_finite())
            || self.precip.is_some_and(|p| !p.is_finite())
        {
            return Err(Error::invalid(format!("{} / {}: non-finite feature", self.storm_id, self.county_id)));
        }
        Ok(())
    }
}

pub fn read_predictors(path: &Path) -> Result<Vec<PredictorRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f).deserialize::<PredictorRow>() {
        let row = row?;
        row.validate()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_predictors(path: &Path, rows: &[PredictorRow]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Functional form of the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    /// Windspeed enters linearly.
    Linear,
    /// Restricted cubic spline in windspeed.
    WindSpline,
    /// Linear terms, each interacted with the hurricane-force indicator.
    HurricaneStratified,
    /// Windspeed spline plus a precipitation spline.
    PrecipSpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub form: Form,
    /// Add state fixed effects.
    pub state: bool,
}

impl Variant {
    pub const fn new(form: Form, state: bool) -> Self {
        Variant { form, state }
    }

    /// The six regression variants compared by cross-validation.
    pub fn regression_variants() -> Vec<Variant> {
        [Form::Linear, Form::WindSpline, Form::HurricaneStratified]
            .into_iter()
            .flat_map(|f| [Variant::new(f, false), Variant::new(f, true)])
            .collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.form {
            Form::Linear => "linear",
            Form::WindSpline => "windspeed_spline",
            Form::HurricaneStratified => "hurricane_stratified",
            Form::PrecipSpline => "precip_spline",
        };
        if self.state { write!(f, "{base}_state") } else { f.write_str(base) }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, state) = match s.strip_suffix("_state") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let form = match base {
            "linear" => Form::Linear,
            "windspeed_spline" => Form::WindSpline,
            "hurricane_stratified" => Form::HurricaneStratified,
            "precip_spline" => Form::PrecipSpline,
            _ => return Err(Error::invalid(format!("unknown variant {s:?}"))),
        };
        Ok(Variant { form, state })
    }
}

/// Where a design column's raw value comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Intercept,
    Linear { variable: String },
    Spline { variable: String, index: usize },
    State { level: String },
    Hurricane,
}

/// One design column: `((raw - center) / scale)`, times the hurricane
/// indicator when `hurricane` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub source: Source,
    pub center: f64,
    pub scale: f64,
    pub hurricane: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub variant: Variant,
    pub columns: Vec<Column>,
    pub splines: Vec<SplineSpec>,
    /// State levels seen when the design was built; the first is the
    /// reference level.
    pub state_levels: Vec<String>,
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

impl DesignMeta {
    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    fn spline(&self, variable: &str) -> Option<&SplineSpec> {
        self.splines.iter().find(|s| s.variable == variable)
    }

    fn raw(&self, row: &PredictorRow, source: &Source) -> Result<f64> {
        Ok(match source {
            Source::Intercept => 1.0,
            Source::Linear { variable } => row
                .value(variable)
                .ok_or_else(|| Error::invalid(format!("{}: {variable} absent", row.county_id)))?,
            Source::Spline { variable, index } => {
                let spec = self
                    .spline(variable)
                    .ok_or_else(|| Error::invalid(format!("no spline for {variable}")))?;
                let x = row
                    .value(variable)
                    .ok_or_else(|| Error::invalid(format!("{}: {variable} absent", row.county_id)))?;
                rcs_basis(x, spec)[*index]
            }
            Source::State { level } => {
                let s = row
                    .state
                    .as_deref()
                    .ok_or_else(|| Error::invalid(format!("{}: state absent", row.county_id)))?;
                f64::from(u8::from(s == level))
            }
            Source::Hurricane => hurricane(row),
        })
    }

    /// Design row for `row` using the stored transforms.
    pub fn row(&self, row: &PredictorRow) -> Result<Vec<f64>> {
        if self.variant.state {
            let s = row
                .state
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("{}: state absent", row.county_id)))?;
            if !self.state_levels.iter().any(|l| l == s) {
                return Err(Error::invalid(format!(
                    "{}: state {s:?} not among fitted levels {:?}",
                    row.county_id, self.state_levels
                )));
            }
        }
        let h = hurricane(row);
        self.columns
            .iter()
            .map(|c| {
                let z = (self.raw(row, &c.source)? - c.center) / c.scale;
                Ok(if c.hurricane { z * h } else { z })
            })
            .collect()
    }

    /// Row-major design matrix for `rows`.
    pub fn matrix(&self, rows: &[PredictorRow]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(rows.len() * self.columns.len());
        for r in rows {
            x.extend(self.row(r)?);
        }
        Ok(x)
    }
}

fn hurricane(row: &PredictorRow) -> f64 {
    f64::from(u8::from(row.vmax_sust > HURRICANE_MS))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    /// Row-major, `n_rows x meta.columns.len()`.
    pub x: Vec<f64>,
    pub n_rows: usize,
    pub meta: DesignMeta,
}

impl Design {
    pub fn n_cols(&self) -> usize {
        self.meta.columns.len()
    }
}

/// Build options beyond the variant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DesignOptions {
    /// Full list of state levels; defaults to those present in the rows.
    pub state_levels: Option<Vec<String>>,
}

fn candidate(name: &str, source: Source, standardize: bool) -> (Column, bool) {
    (
        Column { name: name.to_string(), source, center: 0.0, scale: 1.0, hurricane: false },
        standardize,
    )
}

fn spline_block(
    rows: &[PredictorRow],
    variable: &str,
    k: usize,
    splines: &mut Vec<SplineSpec>,
    warnings: &mut Vec<String>,
    out: &mut Vec<(Column, bool)>,
) -> Result<()> {
    let xs: Vec<f64> = rows.iter().filter_map(|r| r.value(variable)).collect();
    let first = xs.first().copied().unwrap_or(0.0);
    if xs.iter().all(|&v| v == first) {
        warnings.push(format!("{variable} is constant; spline block dropped"));
        return Ok(());
    }
    let spec = SplineSpec::new(variable, quantile_knots(&xs, k)?)?;
    for (j, name) in spec.column_names().into_iter().enumerate() {
        out.push(candidate(&name, Source::Spline { variable: variable.into(), index: j }, true));
    }
    splines.push(spec);
    Ok(())
}

fn missing_rows(rows: &[PredictorRow], absent: impl Fn(&PredictorRow) -> bool) -> Vec<String> {
    rows.iter()
        .filter(|r| absent(r))
        .map(|r| format!("{}/{}", r.storm_id, r.county_id))
        .collect()
}

/// Build the design matrix for `variant`.
///
/// Knots come from the rows' quantiles (4 for windspeed, 3 for year and
/// precipitation). Continuous columns, spline columns included, are
/// z-standardized with the sample mean and sd; indicators are left as is.
/// Columns that are constant over the rows are dropped with a warning.
pub fn build_design(rows: &[PredictorRow], variant: Variant, opts: &DesignOptions) -> Result<Design> {
    if rows.is_empty() {
        return Err(Error::invalid("no predictor rows"));
    }
    for r in rows {
        r.validate()?;
    }
    if variant.form == Form::PrecipSpline {
        let miss = missing_rows(rows, |r| r.precip.is_none());
        if !miss.is_empty() {
            return Err(Error::invalid(format!("precip absent for rows: {}", miss.join(", "))));
        }
    }
    if variant.state {
        let miss = missing_rows(rows, |r| r.state.is_none());
        if !miss.is_empty() {
            return Err(Error::invalid(format!("state absent for rows: {}", miss.join(", "))));
        }
    }

    let mut splines = Vec::new();
    let mut warnings = Vec::new();
    let mut cand: Vec<(Column, bool)> = vec![candidate("(Intercept)", Source::Intercept, false)];
    match variant.form {
        Form::Linear | Form::HurricaneStratified => {
            cand.push(candidate("vmax_sust", Source::Linear { variable: "vmax_sust".into() }, true))
        }
        Form::WindSpline | Form::PrecipSpline => {
            spline_block(rows, "vmax_sust", 4, &mut splines, &mut warnings, &mut cand)?
        }
    }
    for v in SOCIO {
        cand.push(candidate(v, Source::Linear { variable: v.into() }, true));
    }
    spline_block(rows, "year", 3, &mut splines, &mut warnings, &mut cand)?;
    for v in ["exposure", "sust_dur"] {
        cand.push(candidate(v, Source::Linear { variable: v.into() }, true));
    }
    cand.push(candidate("cc1", Source::Linear { variable: "cc1".into() }, false));
    if variant.form == Form::PrecipSpline {
        spline_block(rows, "precip", 3, &mut splines, &mut warnings, &mut cand)?;
    }
    let state_levels: Vec<String> = if variant.state {
        match &opts.state_levels {
            Some(l) => l.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
            None => rows.iter().filter_map(|r| r.state.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
        }
    } else {
        Vec::new()
    };
    for level in state_levels.iter().skip(1) {
        cand.push(candidate(&format!("state{level}"), Source::State { level: level.clone() }, false));
    }
    if variant.form == Form::HurricaneStratified {
        let base: Vec<(Column, bool)> = cand[1..].to_vec();
        cand.push(candidate("hurricane", Source::Hurricane, false));
        for (mut c, s) in base {
            c.name = format!("{}:hurricane", c.name);
            c.hurricane = true;
            cand.push((c, s));
        }
    }

    let mut meta = DesignMeta {
        variant,
        columns: Vec::new(),
        splines,
        state_levels,
        dropped: Vec::new(),
        warnings,
    };
    let n = rows.len() as f64;
    for (mut col, standardize) in cand {
        let raw: Vec<f64> = rows
            .iter()
            .map(|r| meta.raw(r, &col.source))
            .collect::<Result<_>>()?;
        if standardize {
            let mean = raw.iter().sum::<f64>() / n;
            let sd = if rows.len() > 1 {
                (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            if !(sd > 0.0) || !sd.is_finite() {
                meta.warnings.push(format!("{}: zero standard deviation; column dropped", col.name));
                meta.dropped.push(col.name);
                continue;
            }
            col.center = mean;
            col.scale = sd;
        }
        if !matches!(col.source, Source::Intercept) {
            let vals: Vec<f64> = rows
                .iter()
                .zip(&raw)
                .map(|(r, v)| if col.hurricane { (v - col.center) / col.scale * hurricane(r) } else { *v })
                .collect();
            if vals.iter().all(|&v| v == vals[0]) {
                meta.warnings.push(format!("{}: constant over rows; column dropped", col.name));
                meta.dropped.push(col.name);
                continue;
            }
        }
        meta.columns.push(col);
    }
    let x = meta.matrix(rows)?;
    Ok(Design { x, n_rows: rows.len(), meta })
}

/// Thin QR of a full-rank design, reused across response vectors.
#[derive(Debug, Clone)]
pub struct LinearSolver {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl LinearSolver {
    /// Factor `design`; fails when columns are collinear or there are no
    /// residual degrees of freedom.
    pub fn new(design: &Design) -> Result<Self> {
        let (n, p) = (design.n_rows, design.n_cols());
        if n <= p {
            return Err(Error::invalid(format!("{n} rows cannot support {p} coefficients")));
        }
        let x = DMatrix::from_row_slice(n, p, &design.x);
        let aliased = aliased_columns(&x);
        if !aliased.is_empty() {
            return Err(Error::RankDeficient {
                columns: aliased.into_iter().map(|j| design.meta.columns[j].name.clone()).collect(),
            });
        }
        let qr = x.clone().qr();
        Ok(LinearSolver { q: qr.q(), r: qr.r(), x })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    /// Least-squares coefficients and residual sum of squares.
    pub fn ols(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        if y.len() != self.n_rows() {
            return Err(Error::invalid(format!("{} responses for {} rows", y.len(), self.n_rows())));
        }
        let y = DVector::from_column_slice(y);
        let qty = self.q.transpose() * &y;
        let beta = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::invalid("singular triangular factor"))?;
        let resid = &y - &self.x * &beta;
        Ok((beta.as_slice().to_vec(), resid.norm_squared()))
    }

    /// One exact draw from the flat-prior conjugate posterior:
    /// `sigma2 = RSS / chi2(n - p)`, `beta ~ N(beta_hat, sigma2 (X'X)^-1)`.
    pub fn draw(&self, y: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
        let (beta_hat, rss) = self.ols(y)?;
        let df = (self.n_rows() - self.n_cols()) as f64;
        let chi = ChiSquared::new(df).map_err(|e| Error::invalid(e.to_string()))?;
        let sigma2 = rss / chi.sample(rng);
        let z = DVector::from_iterator(self.n_cols(), (0..self.n_cols()).map(|_| StandardNormal.sample(rng)));
        let shift = self
            .r
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::invalid("singular triangular factor"))?;
        let sd = sigma2.sqrt();
        let beta = beta_hat.iter().zip(shift.iter()).map(|(b, s)| b + sd * s).collect();
        Ok((beta, sigma2))
    }
}

/// Columns involved in exact linear dependencies: each column that lies in
/// the span of the columns before it, together with the columns it loads on.
fn aliased_columns(x: &DMatrix<f64>) -> BTreeSet<usize> {
    let mut accepted: Vec<usize> = Vec::new();
    let mut out = BTreeSet::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            out.insert(j);
            continue;
        }
        if !accepted.is_empty() {
            let qr = x.select_columns(&accepted).qr();
            let q = qr.q();
            let proj = q.transpose() * &col;
            let resid = &col - &q * &proj;
            if resid.norm() <= 1e-9 * norm {
                out.insert(j);
                if let Some(coef) = qr.r().solve_upper_triangular(&proj) {
                    let big = coef.amax();
                    for (k, &c) in accepted.iter().enumerate() {
                        if coef[k].abs() > 1e-6 * big {
                            out.insert(c);
                        }
                    }
                }
                continue;
            }
        }
        accepted.push(j);
    }
    out
}

/// One conjugate draw of `(beta, sigma2)` for response `theta_star`.
pub fn fit_linear_draw(theta_star: &[f64], design: &Design, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
    LinearSolver::new(design)?.draw(theta_star, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveFit {
    pub meta: DesignMeta,
    /// `beta[m]` was fit against causal draw `m`.
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub seed: u64,
    pub n_rows: usize,
    /// False when fit to a single response vector (point estimates).
    pub propagated: bool,
}

/// The first row with every numeric feature replaced by its sample median;
/// the base for effect curves.
pub fn median_row(rows: &[PredictorRow]) -> Result<PredictorRow> {
    let mut out = rows.first().cloned().ok_or_else(|| Error::invalid("no predictor rows"))?;
    let names = ["vmax_sust", "sust_dur", "year", "exposure", "precip"];
    for name in names.into_iter().chain(SOCIO) {
        let mut v: Vec<f64> = rows.iter().filter_map(|r| r.value(name)).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        out.set_value(name, quantile_sorted(&v, 0.5))?;
    }
    Ok(out)
}

/// Match predictor rows to effect units by `(storm_id, county_id)`.
pub fn align_rows(effects: &EffectDraws, rows: &[PredictorRow]) -> Result<Vec<PredictorRow>> {
    let mut index: BTreeMap<(&str, &str), &PredictorRow> = BTreeMap::new();
    for r in rows {
        if index.insert((&r.storm_id, &r.county_id), r).is_some() {
            return Err(Error::invalid(format!("duplicate predictor row {}/{}", r.storm_id, r.county_id)));
        }
    }
    effects
        .units
        .iter()
        .map(|u| {
            index
                .get(&(u.storm_id.as_str(), u.county_id.as_str()))
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::invalid(format!("no predictor row for {}/{}", u.storm_id, u.county_id)))
        })
        .collect()
}

fn draw_seed(seed: u64, m: usize) -> u64 {
    derive_seed(seed, &format!("draw-{m}"))
}

fn fit_with(
    design: Design,
    n_draws: usize,
    seed: u64,
    propagated: bool,
    response: impl Fn(usize) -> Vec<f64> + Sync,
) -> Result<PredictiveFit> {
    let solver = LinearSolver::new(&design)?;
    let out: Vec<(Vec<f64>, f64)> = (0..n_draws)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(seed, m));
            solver.draw(&response(m), &mut rng)
        })
        .collect::<Result<_>>()?;
    let (beta, sigma2) = out.into_iter().unzip();
    Ok(PredictiveFit { meta: design.meta, beta, sigma2, seed, n_rows: design.n_rows, propagated })
}

/// Fit the regression once per causal draw: coefficient draw `m` uses the
/// excess rates of draw `m` and an RNG stream keyed by `m` alone.
pub fn fit_predictive(
    effects: &EffectDraws,
    rows: &[PredictorRow],
    variant: Variant,
    seed: u64,
) -> Result<PredictiveFit> {
    if effects.units.iter().any(|u| u.rate.len() != effects.n_draws) {
        return Err(Error::invalid("draw counts differ across storms"));
    }
    if effects.n_draws == 0 {
        return Err(Error::invalid("no causal draws"));
    }
    let aligned = align_rows(effects, rows)?;
    let design = build_design(&aligned, variant, &DesignOptions::default())?;
    fit_with(design, effects.n_draws, seed, true, |m| effects.rates_at(m))
}

/// Fit to fixed point estimates, taking `n_draws` conjugate draws.
pub fn fit_point_estimates(
    points: &[f64],
    rows: &[PredictorRow],
    variant: Variant,
    n_draws: usize,
    seed: u64,
) -> Result<PredictiveFit> {
    if points.len() != rows.len() {
        return Err(Error::invalid("point estimates and rows differ in length"));
    }
    let design = build_design(rows, variant, &DesignOptions::default())?;
    fit_with(design, n_draws, seed, false, |_| points.to_vec())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub storm_id: String,
    pub county_id: String,
    pub draws: Vec<f64>,
    pub summary: PosteriorSummary,
}

/// Raw-scale coefficient: `coef * feature`, where the feature is the raw
/// source value, times the hurricane indicator for interaction terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCoefficient {
    pub name: String,
    pub source: Source,
    pub hurricane: bool,
    pub draws: Vec<f64>,
}

impl PredictiveFit {
    pub fn n_draws(&self) -> usize {
        self.beta.len()
    }

    pub fn coefficient_summaries(&self, level: f64) -> Result<Vec<(String, PosteriorSummary)>> {
        self.meta
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let d: Vec<f64> = self.beta.iter().map(|b| b[j]).collect();
                Ok((c.name.clone(), summarize(&d, level)?))
            })
            .collect()
    }

    /// Posterior predictive draws for new rows: per draw `m`,
    /// `x . beta[m] + N(0, sigma2[m])`. Each row has its own RNG stream keyed
    /// by storm and county.
    pub fn predict(&self, rows: &[PredictorRow], seed: u64, level: f64) -> Result<Vec<Prediction>> {
        rows.iter()
            .map(|r| {
                let x = self.meta.row(r)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{}/{}", r.storm_id, r.county_id)));
                let draws: Vec<f64> = self
                    .beta
                    .iter()
                    .zip(&self.sigma2)
                    .map(|(b, &s2)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        dot(&x, b) + s2.sqrt() * e
                    })
                    .collect();
                Ok(Prediction {
                    storm_id: r.storm_id.clone(),
                    county_id: r.county_id.clone(),
                    summary: summarize(&draws, level)?,
                    draws,
                })
            })
            .collect()
    }

    /// Posterior of the regression mean along a sweep of one feature, the
    /// other features held at `template`.
    pub fn curve(
        &self,
        template: &PredictorRow,
        variable: &str,
        values: &[f64],
        level: f64,
    ) -> Result<Vec<(f64, PosteriorSummary)>> {
        values
            .iter()
            .map(|&v| {
                let mut r = template.clone();
                r.set_value(variable, v)?;
                let x = self.meta.row(&r)?;
                let d: Vec<f64> = self.beta.iter().map(|b| dot(&x, b)).collect();
                Ok((v, summarize(&d, level)?))
            })
            .collect()
    }

    /// Coefficients on the unstandardized features. Centering offsets fold
    /// into the intercept, or into the hurricane indicator for interaction
    /// terms when that column is present.
    pub fn raw_coefficients(&self) -> Vec<RawCoefficient> {
        let cols = &self.meta.columns;
        let mut out: Vec<RawCoefficient> = cols
            .iter()
            .map(|c| RawCoefficient {
                name: c.name.clone(),
                source: c.source.clone(),
                hurricane: c.hurricane,
                draws: Vec::with_capacity(self.beta.len()),
            })
            .collect();
        let intercept = cols.iter().position(|c| c.source == Source::Intercept);
        let h_col = cols.iter().position(|c| c.source == Source::Hurricane && !c.hurricane);
        for b in &self.beta {
            let mut raw: Vec<f64> = b.iter().zip(cols).map(|(v, c)| v / c.scale).collect();
            for (j, c) in cols.iter().enumerate() {
                if c.center != 0.0 {
                    let shift = -b[j] * c.center / c.scale;
                    match (c.hurricane, h_col, intercept) {
                        (true, Some(h), _) => raw[h] += shift,
                        (_, _, Some(i)) => raw[i] += shift,
                        _ => {}
                    }
                }
            }
            for (o, v) in out.iter_mut().zip(raw) {
                o.draws.push(v);
            }
        }
        out
    }
}

/// Raw-scale prediction of the regression mean for draw `m`.
pub fn raw_mean(fit: &PredictiveFit, raw: &[RawCoefficient], row: &PredictorRow, m: usize) -> Result<f64> {
    let h = hurricane(row);
    let mut s = 0.0;
    for c in raw {
        let v = fit.meta.raw(row, &c.source)?;
        s += c.draws[m] * if c.hurricane { v * h } else { v };
    }
    Ok(s)
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Coefficient table: term, posterior mean and equal-tail interval.
pub fn write_coefficients_csv(path: &Path, fit: &PredictiveFit, level: f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["term", "mean", "ci_low", "ci_high", "center", "scale"])?;
    for ((name, s), c) in fit.coefficient_summaries(level)?.into_iter().zip(&fit.meta.columns) {
        w.write_record([
            name,
            s.mean.to_string(),
            s.ci_low.to_string(),
            s.ci_high.to_string(),
            c.center.to_string(),
            c.scale.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions_csv(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["storm_id", "county_id", "mean", "ci_low", "ci_high", "level"])?;
    for p in preds {
        w.write_record([
            p.storm_id.clone(),
            p.county_id.clone(),
            p.summary.mean.to_string(),
            p.summary.ci_low.to_string(),
            p.summary.ci_high.to_string(),
            p.summary.level.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_fit(path: &Path, fit: &PredictiveFit) -> Result<()> {
    let body = serde_json::to_string(fit)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_fit(path: &Path) -> Result<PredictiveFit> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&body)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub variant: Variant,
    /// Pooled out-of-sample RMSE; absent when some fold could not be fit.
    pub rmse: Option<f64>,
    pub fold_rmse: Vec<f64>,
    pub error: Option<String>,
}

/// Out-of-sample RMSE per variant for one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub outcome: String,
    pub folds: usize,
    pub seed: u64,
    pub entries: Vec<CvEntry>,
}

/// Fold labels: a seeded shuffle dealt round-robin into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if n < 2 * folds {
        return Err(Error::invalid(format!("{n} rows leave a fold with fewer than 2 rows")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &i) in perm.iter().enumerate() {
        fold[i] = k % folds;
    }
    Ok(fold)
}

/// K-fold cross-validation of least-squares fits to point estimates.
/// Knots and standardization are re-derived on each training split.
pub fn cross_validate(
    outcome: &str,
    points: &[f64],
    rows: &[PredictorRow],
    variants: &[Variant],
    folds: usize,
    seed: u64,
) -> Result<CvTable> {
    if points.len() != rows.len() {
        return Err(Error::invalid("point estimates and rows differ in length"));
    }
    let fold = fold_assignment(rows.len(), folds, seed)?;
    let levels: Vec<String> = rows.iter().filter_map(|r| r.state.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let opts = DesignOptions { state_levels: Some(levels) };
    let entries = variants
        .iter()
        .map(|&variant| match cv_variant(points, rows, &fold, folds, variant, &opts) {
            Ok((rmse, fold_rmse)) => CvEntry { variant, rmse: Some(rmse), fold_rmse, error: None },
            Err(e) => CvEntry { variant, rmse: None, fold_rmse: Vec::new(), error: Some(e.to_string()) },
        })
        .collect();
    Ok(CvTable { outcome: outcome.to_string(), folds, seed, entries })
}

fn cv_variant(
    points: &[f64],
    rows: &[PredictorRow],
    fold: &[usize],
    folds: usize,
    variant: Variant,
    opts: &DesignOptions,
) -> Result<(f64, Vec<f64>)> {
    let mut sse = 0.0;
    let mut fold_rmse = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..rows.len()).filter(|&i| fold[i] == f).collect();
        let tr_rows: Vec<PredictorRow> = train.iter().map(|&i| rows[i].clone()).collect();
        let tr_y: Vec<f64> = train.iter().map(|&i| points[i]).collect();
        let design = build_design(&tr_rows, variant, opts)?;
        let (beta, _) = LinearSolver::new(&design)?.ols(&tr_y)?;
        let mut fold_sse = 0.0;
        for &i in &test {
            let e = points[i] - dot(&design.meta.row(&rows[i])?, &beta);
            fold_sse += e * e;
        }
        sse += fold_sse;
        fold_rmse.push((fold_sse / test.len() as f64).sqrt());
    }
    Ok(((sse / rows.len() as f64).sqrt(), fold_rmse))
}

/// RMSE grid: one row per variant, one column per outcome.
pub fn write_cv_csv(path: &Path, tables: &[CvTable]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["variant".to_string()];
    header.extend(tables.iter().map(|t| t.outcome.clone()));
    w.write_record(&header)?;
    let mut variants: Vec<Variant> = Vec::new();
    for t in tables {
        for e in &t.entries {
            if !variants.contains(&e.variant) {
                variants.push(e.variant);
            }
        }
    }
    for v in variants {
        let mut rec = vec![v.to_string()];
        for t in tables {
            rec.push(
                t.entries
                    .iter()
                    .find(|e| e.variant == v)
                    .and_then(|e| e.rmse)
                    .map_or(String::new(), |r| r.to_string()),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic predictor rows with independent features, for tests.
pub fn random_rows(n: usize, seed: u64) -> Vec<PredictorRow> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = ["FL", "GA", "LA", "NC", "SC"];
    (0..n)
        .map(|i| PredictorRow {
            storm_id: format!("S{:02}", i % 12),
            county_id: format!("C{i:04}"),
            vmax_sust: rng.random_range(17.4..70.0),
            sust_dur: rng.random_range(0.0..2000.0),
            year: (1999 + i % 12) as f64,
            exposure: rng.random_range(1..20) as f64,
            poverty: rng.random_range(0.05..0.35),
            white_pct: rng.random_range(0.3..0.95),
            owner_occupied: rng.random_range(0.5..0.85),
            age_pct_65_plus: rng.random_range(0.1..0.3),
            median_age: rng.random_range(30.0..50.0),
            population_density: rng.random_range(3.0f64..8.0).exp(),
            median_house_value: rng.random_range(50_000.0..300_000.0),
            no_grad: rng.random_range(0.05..0.35),
            cc1: rng.random_bool(0.3),
            state: Some(states[i % states.len()].to_string()),
            precip: Some(rng.random_range(0.0..300.0)),
        })
        .collect()
}

/// Gaussian noise vector, for tests.
pub fn gaussian_noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, sd).expect("positive sd");
    (0..n).map(|_| d.sample(&mut rng)).collect()
}
