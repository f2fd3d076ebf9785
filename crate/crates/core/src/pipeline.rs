//! One-way workflow: per-storm causal fits, draw-aligned estimands, then a
//! predictive stage that reads the causal draws but never feeds back.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimands::{
    unit_effects, write_county_csv, write_draws_csv, write_storm_csv, write_study_json,
    EffectDraws, PosteriorSummary, StudySummary, UnitEffects,
};
use crate::factor_select::{recommend_k, variance_explained, write_scree_csv, write_scree_svg, KRecommendation};
use crate::mc::{fit_mc, FitSettings, McDiagnostics, McPosterior, ModelSpec, Prior, SamplerSettings};
use crate::panel::{
    build_all_panels, check_panel_inclusion, BuiltPanels, read_counties, read_exposures, ExclusionReport, InclusionThresholds,
    OutcomePanel, PanelBuildConfig, DEFAULT_CONTROL_RADIUS_MILES, GALE_FORCE_MS,
};
use crate::plot::{line_chart, paired_scatter, strip_plot, Band, Series};
use crate::predictive::{
    align_rows, cross_validate, fit_predictive, read_predictors, write_coefficients_csv, write_cv_csv, write_fit,
    median_row, CvTable, Form, PredictiveFit, PredictorRow, Variant,
};
use crate::seed::{derive_seed, sha256_hex};

fn default_outcome() -> String {
    "deaths".into()
}
fn default_k() -> usize {
    4
}
fn default_chains() -> usize {
    2
}
fn default_draws() -> usize {
    1000
}
fn default_level() -> f64 {
    0.95
}
fn default_factor_sd() -> f64 {
    crate::mc::DEFAULT_FACTOR_SD
}
fn default_threshold() -> f64 {
    GALE_FORCE_MS
}
fn default_radius() -> f64 {
    DEFAULT_CONTROL_RADIUS_MILES
}
fn default_true() -> bool {
    true
}
fn default_variant() -> Variant {
    Variant::new(Form::WindSpline, false)
}
fn default_folds() -> usize {
    5
}
fn default_k_values() -> Vec<usize> {
    vec![3, 5]
}
fn default_precip_year() -> f64 {
    2011.0
}

/// Input file locations. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub counties: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub exposures: Option<PathBuf>,
    pub predictors: Option<PathBuf>,
    /// Pairs of adjacent county ids, columns `county_a,county_b`.
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_variant", with = "variant_tag")]
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub cv: bool,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        PredictiveConfig { enabled: true, variant: default_variant(), cv: true, cv_folds: default_folds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    /// Alternative numbers of factors to refit with.
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    /// Refit without controls adjacent to any treated county.
    #[serde(default)]
    pub drop_adjacent: bool,
    /// Predictive refit with a precipitation spline on early storms.
    #[serde(default = "default_true")]
    pub precip: bool,
    #[serde(default = "default_precip_year")]
    pub precip_max_year: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            k_values: default_k_values(),
            drop_adjacent: false,
            precip: true,
            precip_max_year: default_precip_year(),
        }
    }
}

/// Settings for a whole run, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Defaults to `draws`.
    pub warmup: Option<usize>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub prior: Prior,
    /// Gaussian scale on factor loadings; 0 leaves them flat.
    #[serde(default = "default_factor_sd")]
    pub factor_sd: f64,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default = "default_threshold")]
    pub threshold_ms: f64,
    #[serde(default = "default_radius")]
    pub radius_miles: f64,
    #[serde(default)]
    pub inclusion: InclusionThresholds,
    /// Restrict the run to these storms.
    pub storms: Option<Vec<String>>,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub predictive: PredictiveConfig,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod variant_tag {
    use super::Variant;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Variant, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Variant, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            outcome: default_outcome(),
            k: default_k(),
            chains: default_chains(),
            warmup: None,
            draws: default_draws(),
            level: default_level(),
            prior: Prior::Flat,
            factor_sd: default_factor_sd(),
            sampler: SamplerSettings::default(),
            threshold_ms: default_threshold(),
            radius_miles: default_radius(),
            inclusion: InclusionThresholds::default(),
            storms: None,
            inputs: Inputs::default(),
            predictive: PredictiveConfig::default(),
            sensitivity: SensitivityConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting spelled out, suitable as a starting config file.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        let th = &self.inclusion;
        if th.min_population == 0 || th.min_events == 0 || th.min_total == 0 || th.min_controls == 0 {
            return Err(Error::Config("inclusion thresholds must be positive".into()));
        }
        if !(self.threshold_ms > 0.0) || !(self.radius_miles > 0.0) {
            return Err(Error::Config("windspeed threshold and control radius must be positive".into()));
        }
        if self.chains == 0 || self.draws == 0 {
            return Err(Error::Config("chains and draws must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("credible level {} outside (0, 1)", self.level)));
        }
        if !(self.factor_sd >= 0.0) {
            return Err(Error::Config("factor_sd must be non-negative".into()));
        }
        if self.predictive.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn fit_settings(&self, storm_id: &str) -> FitSettings {
        let spec = ModelSpec::new(self.k)
            .with_prior(self.prior)
            .with_factor_sd(if self.k > 0 && self.factor_sd > 0.0 { Some(self.factor_sd) } else { None });
        FitSettings {
            spec,
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            seed: derive_seed(self.seed, storm_id),
            sampler: self.sampler,
            rhat_limit: crate::mc::DEFAULT_RHAT_LIMIT,
        }
    }

    fn panel_build(&self) -> PanelBuildConfig {
        PanelBuildConfig {
            outcome: self.outcome.clone(),
            threshold_ms: self.threshold_ms,
            radius_miles: self.radius_miles,
            inclusion: self.inclusion,
        }
    }
}

/// Panels and side inputs for a run.
#[derive(Debug, Clone, Default)]
pub struct StudyData {
    pub panels: Vec<OutcomePanel>,
    pub approach_dates: BTreeMap<String, NaiveDate>,
    pub exclusions: ExclusionReport,
    pub predictors: Option<Vec<PredictorRow>>,
    pub adjacency: Option<Vec<(String, String)>>,
}

impl StudyData {
    pub fn from_synthetic(study: &crate::synthetic::SyntheticStudy) -> Self {
        StudyData {
            panels: study.panels.clone(),
            approach_dates: study.approach_dates.clone(),
            exclusions: ExclusionReport::default(),
            predictors: Some(study.predictors.clone()),
            adjacency: None,
        }
    }
}

/// Population of every treated unit keyed by `(storm, county)`, for reading
/// effect draws back.
pub fn treated_populations(panels: &[OutcomePanel]) -> BTreeMap<(String, String), f64> {
    panels
        .iter()
        .flat_map(|p| p.treated().iter().map(move |&i| ((p.storm_id.clone(), p.unit_ids[i].clone()), p.population(i))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct AdjacencyRow {
    county_a: String,
    county_b: String,
}

pub fn read_adjacency(path: &Path) -> Result<Vec<(String, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(f)
        .deserialize::<AdjacencyRow>()
        .map(|r| r.map(|r| (r.county_a, r.county_b)).map_err(Error::from))
        .collect()
}

/// Panels from the raw county, count and exposure files named in `config`.
pub fn build_panels(config: &RunConfig) -> Result<BuiltPanels> {
    let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        p.as_ref()
            .map(|p| config.resolve(p))
            .ok_or_else(|| Error::Config(format!("inputs.{what} is required")))
    };
    let counties = read_counties(&need(&config.inputs.counties, "counties")?, &need(&config.inputs.counts, "counts")?)?;
    let exposures = read_exposures(&need(&config.inputs.exposures, "exposures")?)?;
    build_all_panels(&counties, &exposures, &config.panel_build()).map_err(|e| e.in_stage("panels"))
}

/// Build panels from the raw inputs named in `config` and read the optional
/// predictor and adjacency files.
pub fn load_study(config: &RunConfig) -> Result<StudyData> {
    let built = build_panels(config)?;
    let predictors = match &config.inputs.predictors {
        Some(p) => Some(read_predictors(&config.resolve(p))?),
        None => None,
    };
    let adjacency = match &config.inputs.adjacency {
        Some(p) => Some(read_adjacency(&config.resolve(p))?),
        None => None,
    };
    Ok(StudyData {
        panels: built.panels,
        approach_dates: built.approach_dates,
        exclusions: built.report,
        predictors,
        adjacency,
    })
}

/// Causal fit and effects for one storm.
#[derive(Debug, Clone)]
pub struct StormFit {
    pub panel: OutcomePanel,
    pub posterior: McPosterior,
    pub units: Vec<UnitEffects>,
}

#[derive(Debug, Clone)]
pub struct CausalStage {
    pub fits: Vec<StormFit>,
    pub effects: EffectDraws,
    pub warnings: Vec<String>,
}

fn selected<'a>(config: &RunConfig, panels: &'a [OutcomePanel]) -> Result<Vec<&'a OutcomePanel>> {
    let out: Vec<&OutcomePanel> = match &config.storms {
        Some(ids) => {
            for id in ids {
                if !panels.iter().any(|p| &p.storm_id == id) {
                    return Err(Error::Config(format!("storm {id} not among the panels")));
                }
            }
            panels.iter().filter(|p| ids.contains(&p.storm_id)).collect()
        }
        None => panels.iter().collect(),
    };
    if out.is_empty() {
        return Err(Error::invalid("no panels to fit"));
    }
    Ok(out)
}

/// Fit every storm independently and in parallel. Each storm's seed depends
/// only on the master seed and its id, so results do not depend on the
/// storm set or on scheduling.
pub fn run_causal_stage(config: &RunConfig, panels: &[OutcomePanel]) -> Result<CausalStage> {
    let panels = selected(config, panels)?;
    for p in &panels {
        if let Some(rule) = check_panel_inclusion(p, &config.inclusion) {
            return Err(Error::invalid(format!("storm {} fails inclusion: {rule}", p.storm_id)).in_stage("causal"));
        }
    }
    let fits: Vec<StormFit> = panels
        .par_iter()
        .map(|p| {
            let posterior = fit_mc(p, &config.fit_settings(&p.storm_id))?;
            let units = unit_effects(p, &posterior)?;
            Ok(StormFit { panel: (*p).clone(), posterior, units })
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("causal"))?;
    let mut warnings = Vec::new();
    for f in &fits {
        for w in &f.posterior.diagnostics.warnings {
            warnings.push(format!("{}: {w}", f.panel.storm_id));
        }
    }
    let effects = EffectDraws::from_units(fits.iter().flat_map(|f| f.units.iter().cloned()).collect())
        .map_err(|e| e.in_stage("estimands"))?;
    Ok(CausalStage { fits, effects, warnings })
}

/// Long-format posterior export: one row per draw and treated post-start
/// cell.
pub fn write_posterior_csv(path: &Path, panel: &OutcomePanel, post: &McPosterior) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["storm_id", "draw", "chain", "unit_id", "period", "log_mean", "count"])?;
    for (c, &(i, t)) in post.cells.iter().enumerate() {
        for (m, d) in post.draws.iter().enumerate() {
            w.write_record([
                post.storm_id.clone(),
                m.to_string(),
                d.chain.to_string(),
                panel.unit_ids[i].clone(),
                t.to_string(),
                post.log_means[c][m].to_string(),
                post.counterfactuals[c][m].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct DiagnosticsExport<'a> {
    storm_id: &'a str,
    settings: &'a FitSettings,
    seeds: &'a crate::mc::SeedLedger,
    diagnostics: &'a McDiagnostics,
}

pub fn write_diagnostics_json(path: &Path, post: &McPosterior) -> Result<()> {
    let text = serde_json::to_string_pretty(&DiagnosticsExport {
        storm_id: &post.storm_id,
        settings: &post.settings,
        seeds: &post.seeds,
        diagnostics: &post.diagnostics,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Per-storm posterior and diagnostics files under `dir`.
pub fn write_causal_exports(dir: &Path, stage: &CausalStage) -> Result<()> {
    mkdir(dir)?;
    for f in &stage.fits {
        let id = &f.panel.storm_id;
        write_posterior_csv(&dir.join(format!("posterior_{id}.csv")), &f.panel, &f.posterior)?;
        write_diagnostics_json(&dir.join(format!("diagnostics_{id}.json")), &f.posterior)?;
    }
    Ok(())
}

/// County, storm and study summaries plus the draw table and a strip plot of
/// county excess rates by storm.
pub fn write_estimand_exports(dir: &Path, effects: &EffectDraws, level: f64) -> Result<()> {
    mkdir(dir)?;
    write_county_csv(&dir.join("county_effects.csv"), effects, level)?;
    write_storm_csv(&dir.join("storm_effects.csv"), effects, level)?;
    write_study_json(&dir.join("study_effects.json"), effects, level)?;
    write_draws_csv(&dir.join("effect_draws.csv"), effects)?;
    let means = effects.mean_rates();
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (u, m) in effects.units.iter().zip(&means) {
        match groups.iter_mut().find(|g| g.0 == u.storm_id) {
            Some(g) => g.1.push(*m),
            None => groups.push((u.storm_id.clone(), vec![*m])),
        }
    }
    strip_plot(&dir.join("excess_rates.svg"), "County excess rates by storm", "excess events per 100,000", &groups)
}

/// Scree fractions, the recommended K, and their plot.
pub fn write_scree_exports(
    dir: &Path,
    panels: &[&OutcomePanel],
    standardize: bool,
    target: f64,
) -> Result<KRecommendation> {
    mkdir(dir)?;
    let results = panels
        .iter()
        .map(|p| variance_explained(p, standardize, target))
        .collect::<Result<Vec<_>>>()?;
    let rec = recommend_k(&results, target)?;
    write_scree_csv(&dir.join("scree.csv"), &results)?;
    write_scree_svg(&dir.join("scree.svg"), &results, target)?;
    let text = serde_json::to_string_pretty(&rec)?;
    fs::write(dir.join("k_recommendation.json"), text).map_err(|e| Error::io(dir, e))?;
    Ok(rec)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1).max(1) as f64).collect()
}

/// Posterior mean curve over a feature's observed range, as CSV and SVG.
pub fn write_curve(
    dir: &Path,
    stem: &str,
    fits: &[(&str, &PredictiveFit)],
    rows: &[PredictorRow],
    variable: &str,
    level: f64,
) -> Result<()> {
    let xs: Vec<f64> = rows.iter().filter_map(|r| r.value(variable)).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return Err(Error::invalid(format!("no values of {variable} for a curve")));
    }
    let grid = linspace(lo, hi, 41);
    let template = median_row(rows)?;
    let f = fs::File::create(dir.join(format!("{stem}.csv"))).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["model", variable, "mean", "ci_low", "ci_high"])?;
    let mut series = Vec::new();
    let mut band: Option<Band> = None;
    for (label, fit) in fits {
        let curve = fit.curve(&template, variable, &grid, level)?;
        for (x, s) in &curve {
            w.write_record([label.to_string(), x.to_string(), s.mean.to_string(), s.ci_low.to_string(), s.ci_high.to_string()])?;
        }
        if band.is_none() {
            band = Some(curve.iter().map(|(x, s)| (*x, s.ci_low, s.ci_high)).collect());
        }
        series.push(Series { label: label.to_string(), points: curve.iter().map(|(x, s)| (*x, s.mean)).collect() });
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    line_chart(
        &dir.join(format!("{stem}.svg")),
        &format!("Excess rate by {variable}"),
        variable,
        "excess events per 100,000",
        &series,
        band.as_ref(),
    )
}

/// Predictive stage outputs.
#[derive(Debug, Clone)]
pub struct PredictiveStage {
    pub fit: PredictiveFit,
    pub cv: Option<CvTable>,
}

/// Draw-matched predictive fit with optional cross-validation of the
/// regression variants on posterior-mean rates. Reads `effects` only.
pub fn run_predictive_stage(
    config: &RunConfig,
    effects: &EffectDraws,
    rows: &[PredictorRow],
    dir: &Path,
) -> Result<PredictiveStage> {
    mkdir(dir)?;
    let seed = derive_seed(config.seed, "predictive");
    let fit = fit_predictive(effects, rows, config.predictive.variant, seed)?;
    write_fit(&dir.join("fit.json"), &fit)?;
    write_coefficients_csv(&dir.join("coefficients.csv"), &fit, config.level)?;
    let aligned = align_rows(effects, rows)?;
    write_curve(dir, "windspeed_curve", &[(&config.predictive.variant.to_string(), &fit)], &aligned, "vmax_sust", config.level)?;
    let cv = if config.predictive.cv {
        let table = cross_validate(
            &config.outcome,
            &effects.mean_rates(),
            &aligned,
            &Variant::regression_variants(),
            config.predictive.cv_folds,
            derive_seed(config.seed, "cv"),
        )?;
        write_cv_csv(&dir.join("cv_rmse.csv"), std::slice::from_ref(&table))?;
        Some(table)
    } else {
        None
    };
    Ok(PredictiveStage { fit, cv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance record written next to a set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Seeds derived for individual storms or stages.
    pub derived_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
}

/// Files whose contents vary between identical runs (wall-clock timings).
pub const NONDETERMINISTIC_FILES: [&str; 1] = ["report.json"];

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Hash every file under `dir` (except manifests and timing reports) and
/// write `manifest.json`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config_sha256: &str,
    derived_seeds: BTreeMap<String, u64>,
) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut artifacts = Vec::new();
    for rel in files {
        let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == "manifest.json" || NONDETERMINISTIC_FILES.contains(&name) {
            continue;
        }
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed,
        config_sha256: config_sha256.into(),
        derived_seeds,
        artifacts,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StormReport {
    pub storm_id: String,
    pub n_units: usize,
    pub n_treated: usize,
    pub seed: u64,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub divergences: usize,
    pub warnings: Vec<String>,
    pub fit_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_sha256: String,
    pub storms: Vec<StormReport>,
    pub exclusions: ExclusionReport,
    pub study: StudySummary,
    pub k_recommendation: Option<KRecommendation>,
    pub predictive: Option<PredictiveSummary>,
    pub warnings: Vec<String>,
    /// Wall time per stage in seconds.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub variant: String,
    pub n_rows: usize,
    pub n_columns: usize,
    pub coefficients: Vec<(String, PosteriorSummary)>,
    pub cv: Option<CvTable>,
}

pub fn storm_reports(stage: &CausalStage) -> Vec<StormReport> {
    stage
        .fits
        .iter()
        .map(|f| {
            let d = &f.posterior.diagnostics;
            StormReport {
                storm_id: f.panel.storm_id.clone(),
                n_units: f.panel.n_units(),
                n_treated: f.panel.treated().len(),
                seed: f.posterior.seeds.seed,
                converged: d.converged,
                max_rhat: d.max_rhat,
                min_ess: d.min_ess,
                divergences: d.chains.iter().map(|c| c.divergences).sum(),
                warnings: d.warnings.clone(),
                fit_secs: f.posterior.runtime_secs,
            }
        })
        .collect()
}

/// Seeds used by a run, for manifests.
pub fn storm_seeds(config: &RunConfig, stage: &CausalStage) -> BTreeMap<String, u64> {
    let mut seeds: BTreeMap<String, u64> =
        stage.fits.iter().map(|f| (format!("storm:{}", f.panel.storm_id), f.posterior.seeds.seed)).collect();
    seeds.insert("predictive".into(), derive_seed(config.seed, "predictive"));
    seeds.insert("cv".into(), derive_seed(config.seed, "cv"));
    seeds
}

/// The whole workflow. Exports go under `out_dir` in `causal/`,
/// `estimands/`, `factors/` and (when enabled) `predictive/`, with
/// `report.json` and `manifest.json` at the top.
pub fn run_full(config: &RunConfig, data: &StudyData, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    mkdir(out_dir)?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let panels = selected(config, &data.panels)?;
    let rec = write_scree_exports(&out_dir.join("factors"), &panels, false, crate::factor_select::DEFAULT_TARGET)
        .map_err(|e| e.in_stage("factors"))?;
    timings.insert("factors".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let stage = run_causal_stage(config, &data.panels)?;
    write_causal_exports(&out_dir.join("causal"), &stage).map_err(|e| e.in_stage("causal"))?;
    timings.insert("causal".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    write_estimand_exports(&out_dir.join("estimands"), &stage.effects, config.level).map_err(|e| e.in_stage("estimands"))?;
    let study = stage.effects.study_summary(config.level)?;
    timings.insert("estimands".into(), t.elapsed().as_secs_f64());

    let mut warnings = stage.warnings.clone();
    let predictive = match (&data.predictors, config.predictive.enabled) {
        (Some(rows), true) => {
            let t = Instant::now();
            let p = run_predictive_stage(config, &stage.effects, rows, &out_dir.join("predictive"))
                .map_err(|e| e.in_stage("predictive"))?;
            timings.insert("predictive".into(), t.elapsed().as_secs_f64());
            warnings.extend(p.fit.meta.warnings.iter().cloned());
            Some(PredictiveSummary {
                variant: config.predictive.variant.to_string(),
                n_rows: p.fit.n_rows,
                n_columns: p.fit.meta.columns.len(),
                coefficients: p.fit.coefficient_summaries(config.level)?,
                cv: p.cv,
            })
        }
        (None, true) => {
            warnings.push("predictive stage skipped: no predictor file".into());
            None
        }
        _ => None,
    };
    if let Some(w) = &rec.warning {
        warnings.push(w.clone());
    }

    let report = RunReport {
        config_sha256: config.hash(),
        storms: storm_reports(&stage),
        exclusions: data.exclusions.clone(),
        study,
        k_recommendation: Some(rec),
        predictive,
        warnings,
        timings,
    };
    let path = out_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    write_manifest(out_dir, "run-full", config.seed, &config.hash(), storm_seeds(config, &stage))?;
    Ok(report)
}

/// Agreement between posterior-mean county rates of two causal runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub n_pairs: usize,
    pub correlation: Option<f64>,
    pub max_abs_diff: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecipRefit {
    pub max_year: f64,
    pub n_rows: usize,
    pub coefficients: Vec<(String, PosteriorSummary)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub comparisons: Vec<Comparison>,
    pub precip: Option<PrecipRefit>,
    pub warnings: Vec<String>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 { None } else { Some(sab / (saa * sbb).sqrt()) }
}

/// Pair county mean rates by `(storm, county)` and write CSV plus scatter.
pub fn compare_effects(dir: &Path, label: &str, main: &EffectDraws, alt: &EffectDraws) -> Result<Comparison> {
    let alt_means: BTreeMap<(&str, &str), f64> = alt
        .units
        .iter()
        .zip(alt.mean_rates())
        .map(|(u, m)| ((u.storm_id.as_str(), u.county_id.as_str()), m))
        .collect();
    let f = fs::File::create(dir.join(format!("{label}_pairs.csv"))).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["storm_id", "county_id", "main_rate", "alternative_rate"])?;
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (u, m) in main.units.iter().zip(main.mean_rates()) {
        match alt_means.get(&(u.storm_id.as_str(), u.county_id.as_str())) {
            Some(&a) => {
                w.write_record([u.storm_id.clone(), u.county_id.clone(), m.to_string(), a.to_string()])?;
                pairs.push((m, a));
            }
            None => warnings.push(format!("{label}: {}/{} missing from the alternative run", u.storm_id, u.county_id)),
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    paired_scatter(
        &dir.join(format!("{label}_pairs.svg")),
        &format!("County excess rates: main vs {label}"),
        "main model",
        label,
        &pairs,
    )?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(Comparison {
        label: label.into(),
        n_pairs: pairs.len(),
        correlation: pearson(&xs, &ys),
        max_abs_diff: pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        warnings,
    })
}

/// Drop control rows adjacent to any treated unit of the same panel.
/// Returns `None` when too few controls remain for the inclusion rules.
pub fn drop_adjacent_controls(
    panel: &OutcomePanel,
    adjacency: &[(String, String)],
    th: &InclusionThresholds,
) -> Result<Option<OutcomePanel>> {
    let treated: BTreeSet<&str> = panel.treated().iter().map(|&i| panel.unit_ids[i].as_str()).collect();
    let mut adjacent: BTreeSet<&str> = BTreeSet::new();
    for (a, b) in adjacency {
        if treated.contains(a.as_str()) {
            adjacent.insert(b);
        }
        if treated.contains(b.as_str()) {
            adjacent.insert(a);
        }
    }
    let keep: Vec<usize> = (0..panel.n_units())
        .filter(|&i| panel.is_treated_unit(i) || !adjacent.contains(panel.unit_ids[i].as_str()))
        .collect();
    let reduced = panel.select_rows(&keep)?;
    Ok(if check_panel_inclusion(&reduced, th).is_some() { None } else { Some(reduced) })
}

/// Rerun the causal stage under each enabled toggle and compare county
/// rates against the main run; optionally refit the predictive model with a
/// precipitation spline on early storms.
pub fn run_sensitivity(config: &RunConfig, data: &StudyData, out_dir: &Path) -> Result<SensitivityReport> {
    config.validate()?;
    let s = &config.sensitivity;
    if s.drop_adjacent && data.adjacency.is_none() {
        return Err(Error::Config("adjacency sensitivity needs inputs.adjacency".into()));
    }
    mkdir(out_dir)?;
    let main = run_causal_stage(config, &data.panels)?;
    let mut comparisons = Vec::new();
    let mut warnings = Vec::new();
    for &k in &s.k_values {
        let mut alt_cfg = config.clone();
        alt_cfg.k = k;
        let alt = run_causal_stage(&alt_cfg, &data.panels).map_err(|e| e.in_stage("sensitivity"))?;
        comparisons.push(compare_effects(out_dir, &format!("k{k}"), &main.effects, &alt.effects)?);
    }
    if s.drop_adjacent {
        let adjacency = data.adjacency.as_deref().unwrap_or_default();
        let mut reduced = Vec::new();
        for p in selected(config, &data.panels)? {
            match drop_adjacent_controls(p, adjacency, &config.inclusion)? {
                Some(r) => reduced.push(r),
                None => warnings.push(format!("{}: too few non-adjacent controls, storm skipped", p.storm_id)),
            }
        }
        if reduced.is_empty() {
            warnings.push("adjacency sensitivity: no storm kept enough controls".into());
        } else {
            let mut alt_cfg = config.clone();
            alt_cfg.storms = None;
            let alt = run_causal_stage(&alt_cfg, &reduced).map_err(|e| e.in_stage("sensitivity"))?;
            comparisons.push(compare_effects(out_dir, "no_adjacent", &main.effects, &alt.effects)?);
        }
    }
    let precip = match (&data.predictors, s.precip) {
        (Some(rows), true) => Some(precip_refit(config, &main.effects, rows, out_dir).map_err(|e| e.in_stage("sensitivity"))?),
        (None, true) => {
            warnings.push("precipitation refit skipped: no predictor file".into());
            None
        }
        _ => None,
    };
    for c in &comparisons {
        warnings.extend(c.warnings.iter().cloned());
    }
    let report = SensitivityReport { comparisons, precip, warnings };
    let path = out_dir.join("sensitivity.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    write_manifest(out_dir, "sensitivity", config.seed, &config.hash(), storm_seeds(config, &main))?;
    Ok(report)
}

fn precip_refit(config: &RunConfig, effects: &EffectDraws, rows: &[PredictorRow], dir: &Path) -> Result<PrecipRefit> {
    let max_year = config.sensitivity.precip_max_year;
    let early: BTreeSet<(&str, &str)> = rows
        .iter()
        .filter(|r| r.year <= max_year && r.precip.is_some())
        .map(|r| (r.storm_id.as_str(), r.county_id.as_str()))
        .collect();
    let units: Vec<UnitEffects> = effects
        .units
        .iter()
        .filter(|u| early.contains(&(u.storm_id.as_str(), u.county_id.as_str())))
        .cloned()
        .collect();
    if units.is_empty() {
        return Err(Error::invalid(format!("no treated counties with precipitation in storms up to {max_year}")));
    }
    let subset = EffectDraws::from_units(units)?;
    let seed = derive_seed(config.seed, "precip");
    let with_precip = fit_predictive(&subset, rows, Variant::new(Form::PrecipSpline, false), seed)?;
    let without = fit_predictive(&subset, rows, Variant::new(Form::WindSpline, false), seed)?;
    write_coefficients_csv(&dir.join("precip_coefficients.csv"), &with_precip, config.level)?;
    let aligned = align_rows(&subset, rows)?;
    write_curve(
        dir,
        "precip_windspeed_curve",
        &[("with precipitation", &with_precip), ("windspeed only", &without)],
        &aligned,
        "vmax_sust",
        config.level,
    )?;
    Ok(PrecipRefit { max_year, n_rows: with_precip.n_rows, coefficients: with_precip.coefficient_summaries(config.level)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimands::UnitEffects;

    fn effects(rates: &[(&str, &str, f64)]) -> EffectDraws {
        EffectDraws::from_units(
            rates
                .iter()
                .map(|&(s, c, r)| UnitEffects {
                    storm_id: s.into(),
                    county_id: c.into(),
                    population: 1e5,
                    iee: vec![r as i64, r as i64],
                    rate: vec![r, r],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_parses_with_defaults() {
        let c = RunConfig::from_toml_str("seed = 9\n[predictive]\nvariant = \"linear_state\"\n", Path::new("/x")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.k, 4);
        assert_eq!(c.draws, 1000);
        assert_eq!(c.predictive.variant, Variant::new(Form::Linear, true));
        assert_eq!(c.sensitivity.k_values, vec![3, 5]);
        assert_eq!(c.resolve(Path::new("a.csv")), PathBuf::from("/x/a.csv"));
        assert_eq!(c.inclusion, InclusionThresholds::default());
    }

    #[test]
    fn config_template_roundtrips() {
        let mut c = RunConfig::new(3);
        c.inputs.counties = Some("counties.csv".into());
        c.prior = Prior::WeakGaussian { sd: 10.0 };
        c.warmup = Some(500);
        let text = c.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text, Path::new("")).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml_str("seed = 1\n[inclusion]\nmin_total = 30\n[sampler]\nmax_depth = 8", Path::new("")).unwrap();
        assert_eq!(partial.inclusion.min_total, 30);
        assert_eq!(partial.inclusion.min_controls, InclusionThresholds::default().min_controls);
        assert_eq!(partial.sampler.max_depth, 8);
    }

    #[test]
    fn config_rejections() {
        let base = Path::new(".");
        assert!(matches!(RunConfig::from_toml_str("k = 2", base), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("seed = 1\nbogus = 3", base).is_err());
        assert!(RunConfig::from_toml_str("seed = 1\n[inclusion]\nmin_population = 0\nmin_events = 5\nmin_total = 20\nmin_controls = 5", base).is_err());
        assert!(RunConfig::from_toml_str("seed = 1\nthreshold_ms = -1.0", base).is_err());
        assert!(RunConfig::from_toml_str("seed = 1\n[predictive]\nvariant = \"cubic\"", base).is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::new(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.k = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn per_storm_seeds_depend_on_storm_only() {
        let c = RunConfig::new(5);
        assert_eq!(c.fit_settings("S01").seed, derive_seed(5, "S01"));
        assert_ne!(c.fit_settings("S01").seed, c.fit_settings("S02").seed);
        let mut flat = c.clone();
        flat.factor_sd = 0.0;
        assert_eq!(flat.fit_settings("S01").spec.factor_sd, None);
    }

    #[test]
    fn identity_comparison_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let e = effects(&[("A", "1", 3.0), ("A", "2", 5.0), ("B", "1", -1.0)]);
        let c = compare_effects(dir.path(), "same", &e, &e).unwrap();
        assert_eq!(c.n_pairs, 3);
        assert_eq!(c.max_abs_diff, 0.0);
        assert!((c.correlation.unwrap() - 1.0).abs() < 1e-12);
        assert!(dir.path().join("same_pairs.svg").exists());
        let partial = effects(&[("A", "1", 4.0)]);
        let c = compare_effects(dir.path(), "part", &e, &partial).unwrap();
        assert_eq!(c.n_pairs, 1);
        assert_eq!(c.warnings.len(), 2);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    fn panel() -> OutcomePanel {
        let n = 8;
        OutcomePanel::new(
            "S",
            (0..n).map(|i| format!("c{i}")).collect(),
            vec![vec![50; 4]; n],
            vec![vec![1e4; 4]; n],
            3,
            vec![6, 7],
        )
        .unwrap()
    }

    #[test]
    fn adjacency_removal() {
        let th = InclusionThresholds { min_population: 1, min_events: 5, min_total: 5, min_controls: 3 };
        let p = panel();
        assert_eq!(drop_adjacent_controls(&p, &[], &th).unwrap().unwrap(), p);
        let pairs = vec![("c6".to_string(), "c0".to_string()), ("c3".to_string(), "c7".to_string()), ("c1".to_string(), "c2".to_string())];
        let r = drop_adjacent_controls(&p, &pairs, &th).unwrap().unwrap();
        assert_eq!(r.unit_ids, vec!["c1", "c2", "c4", "c5", "c6", "c7"]);
        assert_eq!(r.treated().len(), 2);
        let many: Vec<(String, String)> = (0..5).map(|i| ("c6".to_string(), format!("c{i}"))).collect();
        assert!(drop_adjacent_controls(&p, &many, &th).unwrap().is_none());
    }

    #[test]
    fn manifest_lists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.csv"), "x\n1\n").unwrap();
        fs::write(dir.path().join("report.json"), "{}").unwrap();
        let m = write_manifest(dir.path(), "test", 3, "abc", BTreeMap::new()).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].path, "sub/a.csv");
        assert_eq!(m.artifacts[0].sha256, sha256_hex(b"x\n1\n"));
        let again = write_manifest(dir.path(), "test", 3, "abc", BTreeMap::new()).unwrap();
        assert_eq!(m, again);
    }
}
