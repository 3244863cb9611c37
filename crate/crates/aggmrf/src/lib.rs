//! Learning a click-prediction model from aggregated contingency tables.
//!
//! The training input is not a record-level dataset but a family of
//! contingency tables: per-row example counts and label sums over feature
//! subsets (typically all pairs). The model is the maximum-entropy log-linear
//! joint distribution whose sufficient statistics are exactly those tables,
//! fitted by persistent contrastive divergence with Gibbs-sampled moment
//! estimates. Record-level baselines (logistic regression, Naive Bayes,
//! best-pair models) and the normalized log-likelihood metric are included
//! for comparison.
//!
//! See the `examples/` directory for one runnable walkthrough per capability
//! and the `aggmrf` binary for the batch pipeline.

pub mod baselines;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod train;

pub use error::{Error, Result};
