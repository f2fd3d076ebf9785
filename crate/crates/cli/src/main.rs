//! `mcexcess` command-line interface.
//!
//! Each subcommand reads its inputs, writes artifacts into `--out-dir` and
//! finishes with a `manifest.json` there. Failures print a one-line JSON
//! object `{"kind": ..., "message": ...}` on stderr and exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcexcess::estimands::{read_draws_csv, write_draws_csv};
use mcexcess::factor_select::DEFAULT_TARGET;
use mcexcess::panel::{read_panel_dir, write_panel_dir, BuiltPanels};
use mcexcess::pipeline::{
    build_panels, load_study, run_causal_stage, run_full, run_predictive_stage, run_sensitivity, storm_reports,
    storm_seeds, treated_populations, write_causal_exports, write_estimand_exports, write_manifest,
    write_scree_exports, RunConfig,
};
use mcexcess::predictive::{
    align_rows, cross_validate, read_fit, read_predictors, write_cv_csv, write_predictions_csv, Variant,
};
use mcexcess::seed::{derive_seed, sha256_hex};
use mcexcess::synthetic::{simulate_study, write_study, EffectModel, TruthConfig};
use mcexcess::{Error, Result};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "mcexcess", version, about = "Excess health events after storms via Bayesian matrix completion")]
struct Cli {
    /// Cap on worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed. Overrides the seed in `--config`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for this command's artifacts and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Sampler settings that override the config.
#[derive(Args, Debug, Clone, Default)]
struct FitFlags {
    /// Number of latent factors.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Retained draws per chain.
    #[arg(long)]
    draws: Option<usize>,
    /// Restrict to these storm ids (repeatable).
    #[arg(long = "storm")]
    storms: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic study in the raw input schemas, with ground truth
    /// and a starting config.toml.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        storms: usize,
        /// Counties per storm.
        #[arg(long, default_value_t = 60)]
        units: usize,
        #[arg(long, default_value_t = 0.25)]
        treated_fraction: f64,
        /// Rate ratio on treated post-storm cells.
        #[arg(long, default_value_t = 1.5)]
        rho: f64,
        /// Make the log rate ratio rise by this much per sd of windspeed.
        #[arg(long)]
        wind_effect: Option<f64>,
        #[arg(long, default_value_t = 2)]
        k_true: usize,
    },
    /// Build per-storm panels from the raw inputs named in the config.
    BuildPanels {
        #[command(flatten)]
        common: Common,
    },
    /// Scree analysis of the control rows and a recommended number of factors.
    SelectK {
        #[command(flatten)]
        common: Common,
        /// Directory written by build-panels.
        #[arg(long)]
        panels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET)]
        target: f64,
        /// Scale each period to unit variance before the decomposition.
        #[arg(long)]
        standardize: bool,
    },
    /// Fit the causal model to every panel.
    FitCausal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panels: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// County, storm and study summaries from effect draws.
    Estimands {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panels: PathBuf,
        /// `effect_draws.csv` written by fit-causal.
        #[arg(long)]
        effects: PathBuf,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Draw-matched regression of county excess rates on predictors.
    FitPredictive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panels: PathBuf,
        #[arg(long)]
        effects: PathBuf,
        #[arg(long)]
        predictors: PathBuf,
        /// linear, windspeed_spline, hurricane_stratified or precip_spline,
        /// with an optional `_state` suffix.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Cross-validated RMSE of the regression variants on posterior-mean rates.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panels: PathBuf,
        #[arg(long)]
        effects: PathBuf,
        #[arg(long)]
        predictors: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        /// Variants to compare (repeatable); defaults to all six regression variants.
        #[arg(long = "variant")]
        variants: Vec<Variant>,
    },
    /// Posterior predictive excess rates for scenario rows.
    Predict {
        #[command(flatten)]
        common: Common,
        /// `fit.json` written by fit-predictive.
        #[arg(long)]
        fit: PathBuf,
        /// Predictor rows in the predictors.csv schema.
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Refit under alternative K, without adjacent controls, and with a
    /// precipitation spline; compare against the main run.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
        /// Alternative K values (repeatable); replaces the config's list.
        #[arg(long = "alt-k")]
        alt_k: Vec<usize>,
        #[arg(long)]
        drop_adjacent: bool,
        #[arg(long)]
        no_precip: bool,
    },
    /// The whole workflow from raw inputs to predictive exports.
    RunFull {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
        #[arg(long)]
        no_predictive: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "kind": "usage", "message": msg.trim() }));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "kind": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "kind": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

/// Config from `--config` or defaults, with `--seed` applied on top.
fn run_config(c: &Common, require_file: bool) -> Result<RunConfig> {
    let mut cfg = match (&c.config, c.seed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, _) if require_file => return Err(Error::Config("--config is required".into())),
        (None, Some(seed)) => RunConfig::new(seed),
        (None, None) => return Err(Error::Config("a seed is required: pass --seed or --config".into())),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_fit_flags(cfg: &mut RunConfig, f: &FitFlags) -> Result<()> {
    if let Some(k) = f.k {
        cfg.k = k;
    }
    if let Some(c) = f.chains {
        cfg.chains = c;
    }
    if f.warmup.is_some() {
        cfg.warmup = f.warmup;
    }
    if let Some(d) = f.draws {
        cfg.draws = d;
    }
    if !f.storms.is_empty() {
        cfg.storms = Some(f.storms.clone());
    }
    cfg.validate()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Print to stdout; a closed pipe is not an error.
fn print_json(value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn panels_from(dir: &Path) -> Result<BuiltPanels> {
    read_panel_dir(dir)
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { common, storms, units, treated_fraction, rho, wind_effect, k_true } => {
            let seed = common.seed.ok_or_else(|| Error::Config("simulate needs --seed".into()))?;
            let effect = match wind_effect {
                Some(per_sd) => EffectModel::WindLinked { base: rho, per_sd },
                None => EffectModel::Constant { rho },
            };
            let truth = TruthConfig {
                n_storms: storms,
                n_units: units,
                treated_fraction,
                effect,
                k_true,
                seed,
                ..TruthConfig::default()
            };
            let study = simulate_study(&truth)?;
            mkdir(&common.out_dir)?;
            write_study(&common.out_dir, &study)?;
            let mut cfg = RunConfig::new(seed);
            cfg.inputs.counties = Some("counties.csv".into());
            cfg.inputs.counts = Some("counts.csv".into());
            cfg.inputs.exposures = Some("exposures.csv".into());
            cfg.inputs.predictors = Some("predictors.csv".into());
            cfg.inputs.adjacency = Some("adjacency.csv".into());
            let path = common.out_dir.join("config.toml");
            fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
            let truth_hash = sha256_hex(serde_json::to_string(&truth)?.as_bytes());
            write_manifest(&common.out_dir, "simulate", seed, &truth_hash, BTreeMap::new())?;
            Ok(())
        }
        Command::BuildPanels { common } => {
            let cfg = run_config(&common, true)?;
            let built = build_panels(&cfg)?;
            mkdir(&common.out_dir)?;
            write_panel_dir(&common.out_dir, &built)?;
            write_manifest(&common.out_dir, "build-panels", cfg.seed, &cfg.hash(), BTreeMap::new())?;
            print_json(&json!({
                "panels": built.panels.iter().map(|p| &p.storm_id).collect::<Vec<_>>(),
                "exclusions": built.report.entries.len(),
            }))
        }
        Command::SelectK { common, panels, target, standardize } => {
            let cfg = run_config(&common, false)?;
            let built = panels_from(&panels)?;
            let refs: Vec<_> = built.panels.iter().collect();
            let rec = write_scree_exports(&common.out_dir, &refs, standardize, target)?;
            write_manifest(&common.out_dir, "select-k", cfg.seed, &cfg.hash(), BTreeMap::new())?;
            print_json(&serde_json::to_value(&rec)?)
        }
        Command::FitCausal { common, panels, fit } => {
            let mut cfg = run_config(&common, false)?;
            apply_fit_flags(&mut cfg, &fit)?;
            let built = panels_from(&panels)?;
            let stage = run_causal_stage(&cfg, &built.panels)?;
            write_causal_exports(&common.out_dir, &stage)?;
            write_draws_csv(&common.out_dir.join("effect_draws.csv"), &stage.effects)?;
            write_json(
                &common.out_dir.join("report.json"),
                &json!({ "storms": storm_reports(&stage), "warnings": stage.warnings }),
            )?;
            write_manifest(&common.out_dir, "fit-causal", cfg.seed, &cfg.hash(), storm_seeds(&cfg, &stage))?;
            for w in &stage.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Estimands { common, panels, effects, level } => {
            let mut cfg = run_config(&common, false)?;
            if let Some(l) = level {
                cfg.level = l;
            }
            cfg.validate()?;
            let built = panels_from(&panels)?;
            let draws = read_draws_csv(&effects, &treated_populations(&built.panels))?;
            write_estimand_exports(&common.out_dir, &draws, cfg.level)?;
            write_manifest(&common.out_dir, "estimands", cfg.seed, &cfg.hash(), BTreeMap::new())?;
            print_json(&serde_json::to_value(draws.study_summary(cfg.level)?)?)
        }
        Command::FitPredictive { common, panels, effects, predictors, variant, level } => {
            let mut cfg = run_config(&common, false)?;
            if let Some(v) = variant {
                cfg.predictive.variant = v;
            }
            if let Some(l) = level {
                cfg.level = l;
            }
            cfg.predictive.cv = false;
            cfg.validate()?;
            let built = panels_from(&panels)?;
            let draws = read_draws_csv(&effects, &treated_populations(&built.panels))?;
            let rows = read_predictors(&predictors)?;
            let stage = run_predictive_stage(&cfg, &draws, &rows, &common.out_dir)?;
            write_manifest(
                &common.out_dir,
                "fit-predictive",
                cfg.seed,
                &cfg.hash(),
                seeds(&[("predictive", stage.fit.seed)]),
            )?;
            for w in &stage.fit.meta.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Cv { common, panels, effects, predictors, folds, variants } => {
            let cfg = run_config(&common, false)?;
            let folds = folds.unwrap_or(cfg.predictive.cv_folds);
            let variants = if variants.is_empty() { Variant::regression_variants() } else { variants };
            let built = panels_from(&panels)?;
            let draws = read_draws_csv(&effects, &treated_populations(&built.panels))?;
            let rows = align_rows(&draws, &read_predictors(&predictors)?)?;
            let seed = derive_seed(cfg.seed, "cv");
            let table = cross_validate(&cfg.outcome, &draws.mean_rates(), &rows, &variants, folds, seed)?;
            mkdir(&common.out_dir)?;
            write_cv_csv(&common.out_dir.join("cv_rmse.csv"), std::slice::from_ref(&table))?;
            write_json(&common.out_dir.join("cv.json"), &serde_json::to_value(&table)?)?;
            write_manifest(&common.out_dir, "cv", cfg.seed, &cfg.hash(), seeds(&[("cv", seed)]))?;
            Ok(())
        }
        Command::Predict { common, fit, scenarios, level } => {
            let mut cfg = run_config(&common, false)?;
            if let Some(l) = level {
                cfg.level = l;
            }
            cfg.validate()?;
            let model = read_fit(&fit)?;
            let rows = read_predictors(&scenarios)?;
            let seed = derive_seed(cfg.seed, "predict");
            let preds = model.predict(&rows, seed, cfg.level)?;
            mkdir(&common.out_dir)?;
            write_predictions_csv(&common.out_dir.join("predictions.csv"), &preds)?;
            write_manifest(&common.out_dir, "predict", cfg.seed, &cfg.hash(), seeds(&[("predict", seed)]))?;
            Ok(())
        }
        Command::Sensitivity { common, fit, alt_k, drop_adjacent, no_precip } => {
            let mut cfg = run_config(&common, true)?;
            apply_fit_flags(&mut cfg, &fit)?;
            if !alt_k.is_empty() {
                cfg.sensitivity.k_values = alt_k;
            }
            cfg.sensitivity.drop_adjacent |= drop_adjacent;
            cfg.sensitivity.precip &= !no_precip;
            let data = load_study(&cfg)?;
            let report = run_sensitivity(&cfg, &data, &common.out_dir)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::RunFull { common, fit, no_predictive } => {
            let mut cfg = run_config(&common, true)?;
            apply_fit_flags(&mut cfg, &fit)?;
            cfg.predictive.enabled &= !no_predictive;
            let data = load_study(&cfg)?;
            let report = run_full(&cfg, &data, &common.out_dir)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&serde_json::to_value(&report.study)?)
        }
    }
}
