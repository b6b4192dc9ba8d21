//! Covariate-dependent graphical model estimation.
//!
//! Each node of a graphical model is regressed on all other nodes with
//! coefficients `beta_jk(z)` that are functions of an external covariate
//! `z`. The coefficient functions are produced jointly by a single
//! feed-forward network with a `p(p-1)`-wide output head and trained on the
//! nodewise mean squared error. Per-sample graphs are read off as
//! `-beta_jk(z)`.
//!
//! The crate also carries everything needed to benchmark that estimator:
//! six synthetic data-generating processes with regenerable ground truth,
//! graph post-processing (normalization, AND-rule thresholding), skeleton
//! recovery metrics, a nodewise Lasso baseline, closed-form error-bound
//! calculators, and an experiment harness.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod estimator;
pub mod graphops;
pub mod harness;
pub mod metrics;
pub mod neuralnet;
pub mod numerics;
pub mod theory;

pub use error::{Error, Result};
