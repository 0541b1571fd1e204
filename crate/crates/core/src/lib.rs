//! Nonparametric empirical-likelihood inference for linear mixed-effects
//! models with a linear covariance structure `H_i(θ) = Σ_q θ_q Φ_iq`.
//!
//! The crate covers
//! - the local test of a single variance component, including the boundary
//!   null `θ₁ = 0` ([`local_test`]),
//! - the empirical-likelihood test and confidence intervals for the fixed
//!   effects ([`fixed_effects`]),
//! - a maximally selected statistic over a grid of correlated outcomes with a
//!   multiplier-perturbation null distribution, and an interval scan
//!   ([`global`]),
//! - a twin-family simulator and Monte Carlo experiment drivers ([`sim`]),
//! - actigraphy preprocessing into quantile profiles ([`ingest`]).

pub mod distributions;
pub mod el;
pub mod error;
pub mod estimation;
pub mod fixed_effects;
pub mod global;
pub mod ingest;
pub mod io;
pub mod model;
pub mod rng;
pub mod sim;
pub mod validate;

pub use error::{Error, Result};
pub use model::{ModelDataset, SubjectBlock, ThetaVector, TwinZygosity};
