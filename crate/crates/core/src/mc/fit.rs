use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{effective_sample_size, split_rhat};
use super::model::{McParams, McTarget, ModelSpec};
use super::nuts::{run_nuts, run_random_walk, ChainOutput, SamplerKind, SamplerSettings};
use crate::error::{Error, Result};
use crate::panel::OutcomePanel;
use crate::seed::derive_seed;

pub const DEFAULT_RHAT_LIMIT: f64 = 1.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub spec: ModelSpec,
    pub chains: usize,
    /// Warmup iterations per chain; `None` means equal to `draws`.
    pub warmup: Option<usize>,
    /// Post-warmup draws per chain.
    pub draws: usize,
    pub seed: u64,
    pub sampler: SamplerSettings,
    pub rhat_limit: f64,
}

impl FitSettings {
    pub fn new(k: usize, seed: u64) -> Self {
        FitSettings {
            spec: ModelSpec::new(k),
            chains: 2,
            warmup: None,
            draws: 1000,
            seed,
            sampler: SamplerSettings::default(),
            rhat_limit: DEFAULT_RHAT_LIMIT,
        }
    }

    pub fn warmup_iters(&self) -> usize {
        self.warmup.unwrap_or(self.draws)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDraw {
    pub chain: usize,
    pub iteration: usize,
    pub params: McParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub unit: usize,
    pub period: usize,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub seed: u64,
    pub step_size: f64,
    pub divergences: usize,
    pub mean_accept: f64,
    pub mean_leapfrog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDiagnostics {
    /// Per masked cell, on the log-mean scale. Empty when fewer than two
    /// chains or four draws per chain were run.
    pub cells: Vec<CellDiagnostic>,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub rhat_limit: f64,
    /// False when any monitored R-hat exceeds the limit.
    pub converged: bool,
    pub chains: Vec<ChainSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub seed: u64,
    pub chain_seeds: Vec<u64>,
    pub predictive_seeds: Vec<u64>,
}

/// Posterior draws for one panel plus counterfactual predictions for its
/// treated post-start cells. Draw `m` of every per-cell sequence was produced
/// from `draws[m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPosterior {
    pub storm_id: String,
    pub settings: FitSettings,
    pub unit_ids: Vec<String>,
    pub n_periods: usize,
    pub draws: Vec<McDraw>,
    /// Masked cells `(i, t)`, in `OutcomePanel::masked_cells` order.
    pub cells: Vec<(usize, usize)>,
    /// `counterfactuals[c][m]`: predictive draw of `Y_it(0)` for cell `c`.
    pub counterfactuals: Vec<Vec<u64>>,
    /// `log_means[c][m]`: log-mean of cell `c` under draw `m`.
    pub log_means: Vec<Vec<f64>>,
    pub diagnostics: McDiagnostics,
    pub seeds: SeedLedger,
    /// Wall time of the fit in seconds. Not part of any deterministic export.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl McPosterior {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn cell_index(&self, i: usize, t: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (i, t))
    }

    /// Posterior mean of `exp(log_mean)` for any cell of `panel`.
    pub fn posterior_mean_mu(&self, panel: &OutcomePanel, i: usize, t: usize) -> f64 {
        let p = panel.offset(i, t).ln();
        self.draws.iter().map(|d| (d.params.linear(i, t) + p).exp()).sum::<f64>()
            / self.draws.len() as f64
    }
}

/// Sample from NB(mean `mu`, dispersion `eta`) as a gamma–Poisson mixture.
pub fn sample_nb<R: Rng>(mu: f64, eta: f64, rng: &mut R) -> u64 {
    let lambda = if eta > 1e12 {
        mu
    } else {
        match Gamma::new(eta, mu / eta) {
            Ok(g) => g.sample(rng),
            Err(_) => mu,
        }
    };
    if !(lambda > 0.0) || !lambda.is_finite() {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => lambda.round() as u64,
    }
}

/// Starting point: intercept at the log pooled control rate, small noise on
/// the remaining location and factor terms, dispersion 10.
fn initial_values(panel: &OutcomePanel, target: &McTarget, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut ys, mut ps) = (0.0, 0.0);
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if !panel.d(i, t) {
                ys += panel.y(i, t) as f64;
                ps += panel.offset(i, t);
            }
        }
    }
    let alpha = if ys > 0.0 { (ys / ps).ln() } else { (0.5 / ps).ln() };
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut x: Vec<f64> = (0..target.dim()).map(|_| noise.sample(rng)).collect();
    x[0] = alpha;
    let last = x.len() - 1;
    x[last] = 10f64.ln();
    x
}

/// Fit the count matrix-completion model on untreated cells and draw
/// counterfactual counts for every treated post-start cell.
pub fn fit_mc(panel: &OutcomePanel, settings: &FitSettings) -> Result<McPosterior> {
    let started = Instant::now();
    if settings.chains == 0 || settings.draws == 0 {
        return Err(Error::invalid("chains and draws must be positive"));
    }
    let target = McTarget::new(panel, settings.spec)?;
    let chain_seeds: Vec<u64> = (0..settings.chains)
        .map(|c| derive_seed(settings.seed, &format!("chain-{c}")))
        .collect();
    let predictive_seeds: Vec<u64> = chain_seeds
        .iter()
        .map(|&s| derive_seed(s, "predictive"))
        .collect();

    let warmup = settings.warmup_iters();
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(chain_seeds[c]);
            let init = initial_values(panel, &target, &mut rng);
            match settings.sampler.kind {
                SamplerKind::Nuts => {
                    run_nuts(&target, init, warmup, settings.draws, &settings.sampler, c, &mut rng)
                }
                SamplerKind::RandomWalk => run_random_walk(
                    &target,
                    init,
                    warmup,
                    settings.draws,
                    settings.sampler.rw_thin,
                    c,
                    &mut rng,
                ),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let cells = panel.masked_cells();
    let mut draws = Vec::with_capacity(settings.chains * settings.draws);
    let mut counterfactuals = vec![Vec::with_capacity(draws.capacity()); cells.len()];
    let mut log_means = vec![Vec::with_capacity(draws.capacity()); cells.len()];
    for (c, out) in outputs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(predictive_seeds[c]);
        for (it, x) in out.draws.iter().enumerate() {
            let params = target.unpack(x);
            for (k, &(i, t)) in cells.iter().enumerate() {
                let lm = params.linear(i, t) + panel.offset(i, t).ln();
                log_means[k].push(lm);
                counterfactuals[k].push(sample_nb(lm.exp(), params.eta, &mut rng));
            }
            draws.push(McDraw { chain: c, iteration: it, params });
        }
    }

    let diagnostics = diagnose(&cells, &log_means, &outputs, &chain_seeds, settings);
    Ok(McPosterior {
        storm_id: panel.storm_id.clone(),
        settings: settings.clone(),
        unit_ids: panel.unit_ids.clone(),
        n_periods: panel.n_periods(),
        draws,
        cells,
        counterfactuals,
        log_means,
        diagnostics,
        seeds: SeedLedger { seed: settings.seed, chain_seeds, predictive_seeds },
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

fn diagnose(
    cells: &[(usize, usize)],
    log_means: &[Vec<f64>],
    outputs: &[ChainOutput],
    chain_seeds: &[u64],
    settings: &FitSettings,
) -> McDiagnostics {
    let per_chain = settings.draws;
    let mut cell_diag = Vec::new();
    if outputs.len() >= 2 && per_chain >= 4 {
        for (k, &(i, t)) in cells.iter().enumerate() {
            let split: Vec<Vec<f64>> = log_means[k].chunks(per_chain).map(<[f64]>::to_vec).collect();
            // both are infallible for >= 2 chains of >= 4 draws
            let rhat = split_rhat(&split).unwrap_or(f64::NAN);
            let ess = effective_sample_size(&split).unwrap_or(f64::NAN);
            cell_diag.push(CellDiagnostic { unit: i, period: t, rhat, ess });
        }
    }
    let max_rhat = cell_diag.iter().map(|c| c.rhat).fold(None, |a: Option<f64>, r| {
        Some(a.map_or(r, |a| a.max(r)))
    });
    let min_ess = cell_diag.iter().map(|c| c.ess).fold(None, |a: Option<f64>, r| {
        Some(a.map_or(r, |a| a.min(r)))
    });
    let mut warnings = Vec::new();
    let converged = match max_rhat {
        Some(r) if !(r <= settings.rhat_limit) => {
            warnings.push(format!("max R-hat {r:.3} exceeds {:.3}", settings.rhat_limit));
            false
        }
        _ => true,
    };
    let chains: Vec<ChainSummary> = outputs
        .iter()
        .enumerate()
        .map(|(c, o)| ChainSummary {
            chain: c,
            seed: chain_seeds[c],
            step_size: o.step_size,
            divergences: o.divergences,
            mean_accept: o.mean_accept,
            mean_leapfrog: o.mean_leapfrog,
        })
        .collect();
    let divergent: usize = chains.iter().map(|c| c.divergences).sum();
    if divergent > 0 {
        warnings.push(format!("{divergent} divergent transitions after warmup"));
    }
    McDiagnostics {
        cells: cell_diag,
        max_rhat,
        min_ess,
        rhat_limit: settings.rhat_limit,
        converged,
        chains,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::Prior;
    use crate::synthetic::{grid_posterior_k0, simulate_study, TruthConfig};

    fn small_study() -> OutcomePanel {
        let cfg = TruthConfig { n_units: 16, treated_fraction: 0.25, seed: 4, ..TruthConfig::default() };
        simulate_study(&cfg).unwrap().panels.remove(0)
    }

    fn quick(k: usize, seed: u64) -> FitSettings {
        FitSettings { draws: 60, warmup: Some(80), ..FitSettings::new(k, seed) }
    }

    #[test]
    fn nb_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(mu, eta) in &[(4.0, 2.0), (30.0, 50.0), (2.0, 1e13)] {
            let n = 40_000;
            let xs: Vec<f64> = (0..n).map(|_| sample_nb(mu, eta, &mut rng) as f64).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let want = mu + mu * mu / eta;
            assert!((mean / mu - 1.0).abs() < 0.03, "mean {mean} vs {mu}");
            assert!((var / want - 1.0).abs() < 0.06, "var {var} vs {want}");
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let p = small_study();
        let a = fit_mc(&p, &quick(1, 9)).unwrap();
        let b = fit_mc(&p, &quick(1, 9)).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.counterfactuals, b.counterfactuals);
        let c = fit_mc(&p, &quick(1, 10)).unwrap();
        assert_ne!(a.draws, c.draws);
        assert_eq!(a.n_draws(), 120);
        assert_eq!(a.cells, p.masked_cells());
    }

    #[test]
    fn treated_outcomes_never_reach_the_fit() {
        let p = small_study();
        let mut q = p.clone();
        for (i, t) in p.masked_cells() {
            q.set_y(i, t, p.y(i, t) * 7 + 13);
        }
        let a = fit_mc(&p, &quick(1, 2)).unwrap();
        let b = fit_mc(&q, &quick(1, 2)).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.counterfactuals, b.counterfactuals);
        assert_eq!(a.log_means, b.log_means);
    }

    #[test]
    fn intercept_only_matches_grid() {
        let p = OutcomePanel::new(
            "tiny",
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![14, 22, 9, 17], vec![30, 25, 41, 28], vec![11, 16, 13, 0]],
            vec![vec![1e4; 4], vec![2e4; 4], vec![8e3; 4]],
            3,
            vec![2],
        )
        .unwrap();
        let prior = Prior::WeakGaussian { sd: 10.0 };
        let settings = FitSettings {
            spec: ModelSpec::intercept_only().with_prior(prior),
            chains: 4,
            draws: 2000,
            ..FitSettings::new(0, 5)
        };
        let post = fit_mc(&p, &settings).unwrap();
        let grid = grid_posterior_k0(&p, prior, 300).unwrap();
        for i in 0..3 {
            for t in 0..4 {
                let got = post.posterior_mean_mu(&p, i, t);
                let want = grid.mu[i * 4 + t];
                assert!((got / want - 1.0).abs() < 0.02, "cell ({i},{t}): {got} vs {want}");
            }
        }
        assert!(post.diagnostics.converged);
    }

    #[test]
    fn rejects_empty_runs() {
        let p = small_study();
        assert!(fit_mc(&p, &FitSettings { draws: 0, ..quick(1, 1) }).is_err());
        assert!(fit_mc(&p, &FitSettings { chains: 0, ..quick(1, 1) }).is_err());
        assert_eq!(FitSettings::new(2, 1).warmup_iters(), 1000);
    }
}
