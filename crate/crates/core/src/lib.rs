//! Selective-shrinkage estimation of many partially-overlapping binary
//! sub-treatment effects.
//!
//! Outcome and treatments are partialled out against covariates
//! ([`residualize`]), a ridge regression penalizes every sub-treatment
//! coefficient but leaves the focal coefficient free ([`ridge`]), and the
//! aggregate and per-sub-treatment effects are rebuilt from any fit
//! ([`reconstruct`]). [`simulation`] reproduces the shrinkage paths and
//! bias/variance trade-off on a known data-generating process.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod model;
pub mod residualize;
pub mod reconstruct;
pub mod ridge;
pub mod simulation;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{apply_focal, validate_dataset, ColumnRoles, Dataset, FocalSpec, RawTable, ResidualizedDesign};
pub use residualize::{residualize, NuisanceLearner, NuisanceSpec};
pub use ridge::{estimate_covariance, fit_ridge, residual_variance, CovarianceKind, RidgeFit, RidgeProblem};
