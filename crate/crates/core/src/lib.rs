//! Failure audit for binary classifiers.
//!
//! Bootstrapped subgroup metrics, univariate rate tests, and multivariate
//! logistic regression of false negatives and false positives with
//! odds-ratio to risk-ratio conversion. Also includes the patch geometry
//! used to assemble a mammography patch cohort.

pub mod audit;
pub mod error;
pub mod metrics;
pub mod patch_geom;
pub mod pgm;
pub mod prep;
pub mod records;
pub mod registry;
pub mod render;
pub mod resample;
pub mod risk_model;
pub mod seed;
pub mod special;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
