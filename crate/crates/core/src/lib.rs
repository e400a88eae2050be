//! Sparse implicit process regression: an RFF Gaussian-process prior, a
//! neural implicit posterior over inducing values, an exact GP baseline,
//! synthetic data and probabilistic scores.

pub mod bridge;
pub mod checks;
pub mod csv;
pub mod datasets;
pub mod exact_gp;
pub mod experiment;
pub mod metrics;
mod error;
pub mod objective;
pub mod posterior;
pub mod prior;
pub mod ratio;
pub mod rng;

pub use error::{Result, SipError};
