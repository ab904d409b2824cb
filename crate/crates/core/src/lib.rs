//! Multiclass logistic regression on functional predictors with a sparse
//! group lasso penalty.
//!
//! Curves are smoothed onto B-spline bases ([`basis`]), turned into design
//! blocks through their Gram matrices ([`model`]) and fitted by IRLS with
//! QR-orthogonalized blockwise coordinate descent ([`sgl`]). The penalty
//! zeroes whole predictors (variable selection) and individual
//! class-versus-reference coefficient blocks (decision boundary
//! selection). Tuning parameters are chosen by BIC ([`selection`]) and
//! selection stability is summarized over bootstrap resamples with
//! rotated reference classes ([`bootstrap`]).

pub mod basis;
pub mod bootstrap;
pub mod cli;
pub mod config;
pub mod error;
pub mod ingest;
pub mod model;
pub mod parallel;
pub mod selection;
pub mod sgl;
pub mod synthetic;

pub use error::{Error, Result};
