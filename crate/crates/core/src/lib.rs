//! Inferable explainable boosting machines.
//!
//! An EBM is a generalized additive model `y ≈ β + Σ_k f_k(x_k)` fit by
//! boosting univariate histogram trees, one shape function per feature.
//! This crate replaces the usual sum of trees with a running average
//! (Boulevard regularization), which drives the ensemble to a feature-wise
//! kernel ridge regression fixed point and makes the fitted effects
//! asymptotically normal. That limit is what buys inference: closed-form
//! confidence intervals for each shape function, for the intercept and for
//! predictions, plus prediction and reproduction intervals — all computed
//! in histogram bin space, so a query costs `O(m²)` for `m` bins no matter
//! how many training samples there were.
//!
//! Module map:
//!
//! - [`data`]: CSV ingestion and per-feature quantile binning.
//! - [`trees`]: univariate histogram regression trees and their bin-level
//!   structure matrices `B`/`D`.
//! - [`boost`]: the three Boulevard training loops (parallel, leave-one-out,
//!   random cyclic) and the expected-kernel accumulator.
//! - [`oracle`]: dense sample-space ground truth — structure matrices,
//!   kernel ridge fixed points, influence vectors — used to verify both the
//!   boosting dynamics and the bin-space shortcut on small instances.
//! - [`inference`]: the bin-space cache (`H`, `M⁽ᵏ⁾`) and every interval
//!   and test query.
//! - [`experiments`]: synthetic generators and the desk-scale validation
//!   suite (coverage, MSE rate, influence-norm rate, overfitting).
//! - [`verify`]: the self-check suite behind `infebm verify`.
//! - [`model`]: the versioned on-disk model container.

pub mod boost;
pub mod data;
pub mod experiments;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod stats;
pub mod trees;
pub mod verify;

pub use boost::{train, EnsembleModel, KernelAccumulator, TrainConfig, Variant};
pub use data::{bin_features, load_csv, BinnedDataset, Dataset};
pub use inference::{build_cache, InferenceCache, IntervalKind, IntervalResult};
pub use model::FittedModel;
