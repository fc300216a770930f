//! Bayesian integration of a probability sample (ps) and a non-probability
//! sample (nps) for finite-population inference.
//!
//! The crate estimates nps propensity-score weights against the ps, adjusts
//! weights to effective sample sizes, fits five posterior scenarios for a
//! Gaussian study variable (nps-only, nps-as-prior, ps-as-prior, ps-only,
//! ps-unweighted) with a power-prior discount factor sampled on a grid, and
//! predicts the finite population mean by surrogate composition. A companion
//! simulation engine generates finite populations under controlled
//! model-to-data correlation, draws the two samples by Poisson and
//! randomized systematic PPS sampling, and aggregates bias, RMSE, coverage
//! and interval-width comparisons across scenarios. A binary-response
//! pipeline (griddy Gibbs over the discount factor and coefficients with
//! constrained covariate resampling) and a two-stage bootstrap for
//! weight-estimation uncertainty round out the toolkit.

pub mod binary;
pub mod bootstrap;
pub mod config;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod posterior;
pub mod prediction;
pub mod report;
pub mod rngstat;
pub mod simulation;
pub mod weights;

pub use error::{Result, SurvintError};
