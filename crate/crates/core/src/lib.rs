//! Bayesian count-data matrix completion for estimating excess health events
//! caused by discrete exposure events, with a one-way (cut) predictive stage
//! relating county-level effects to exposure and community features.

pub mod error;
pub mod estimands;
pub mod factor_select;
pub mod mc;
pub mod panel;
pub mod pipeline;
pub mod plot;
pub mod predictive;
pub mod seed;
pub mod spline;
pub mod synthetic;

pub use error::{Error, Result};
