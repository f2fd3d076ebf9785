use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data gap for county {county}: missing dates {from}..={to}")]
    DataGap {
        county: String,
        from: chrono::NaiveDate,
        to: chrono::NaiveDate,
    },

    #[error("degenerate knots: {0}")]
    DegenerateKnots(String),

    #[error("rank-deficient design; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("sampler diagnostic failure at iteration {iteration} (chain {chain}): {message}")]
    Sampler {
        chain: usize,
        iteration: usize,
        message: String,
        state: Vec<f64>,
    },

    #[error("grid integration did not converge: {0}")]
    GridNotConverged(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DataGap { .. } => "data_gap",
            Error::DegenerateKnots(_) => "degenerate_knots",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Sampler { .. } => "sampler",
            Error::GridNotConverged(_) => "grid_not_converged",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
        }
    }
}
