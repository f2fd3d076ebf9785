//! Bayesian count matrix completion fitted on untreated cells, with
//! posterior-predictive counterfactuals for treated cells.

pub mod diagnostics;
mod fit;
pub mod model;
pub mod nuts;

pub use diagnostics::{effective_sample_size, split_rhat};
pub use fit::{
    fit_mc, sample_nb, CellDiagnostic, ChainSummary, FitSettings, McDiagnostics, McDraw,
    McPosterior, SeedLedger, DEFAULT_RHAT_LIMIT,
};
pub use model::{control_loglik, log_mean, nb_logpmf, McParams, McTarget, ModelSpec, Prior, DEFAULT_FACTOR_SD};
pub use nuts::{SamplerKind, SamplerSettings};
