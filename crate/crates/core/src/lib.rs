//! Detection, extraction and feature attribution of distribution shifts
//! between two unlabeled cohorts.
//!
//! The pipeline pools the cohorts, scores every point by the binomial
//! evidence of same-cohort enrichment among its ordered neighbours
//! ([`score`]), iteratively prunes significant excess-mass neighbourhoods in
//! both directions until the score tails match their nulls ([`equalize`]),
//! and attributes each pruned mode to a sparse feature subset with a learned
//! diagonal metric ([`subspace`]). [`benchgen`] generates the 20-dimensional
//! Gaussian-mixture benchmark and [`baseline`] provides the MLP classifier
//! two-sample comparison.

pub mod baseline;
pub mod benchgen;
pub mod dataset;
pub mod equalize;
pub mod error;
pub mod knn;
pub mod optim;
pub mod pipeline;
pub mod score;
pub mod subspace;

pub use dataset::{load_csv, pool, standardize, Cohort, FeatureMatrix, PooledIndex};
pub use error::{Error, Result};
