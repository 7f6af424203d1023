//! Group-robust training for linear classifiers on tabular data.
//!
//! The core idea: instead of minimizing average loss, train against the
//! worst-case reweighting of group losses inside a chi-square ball around
//! uniform, allowing quasi-probability (negative) weights, independently
//! per class. The inner maximization has a closed form, so training
//! alternates cheap analytic weight updates with stochastic classifier
//! updates, smoothed so the weights settle instead of oscillating.
//!
//! The crate is organized around that loop:
//!
//! - [`dataset`]: labeled tabular data, class-group cells, balanced
//!   sampling, stratified splits, synthetic bias generators.
//! - [`model`]: multinomial logistic regression with AdamW and cosine decay.
//! - [`dro`]: the chi-square uncertainty set, closed-form best responses,
//!   and a grid oracle to check them.
//! - [`metrics`]: classwise accuracy gaps, equalized-odds gaps, balanced
//!   and worst-group accuracy, loss-variance diagnostics.
//! - [`trainer`]: the training loop and its ablation variants.
//! - [`harness`]: end-to-end experiments, sweeps, Pareto envelopes, model
//!   selection, and report emission.
//!
//! Each major capability has a runnable demo under `examples/`; start with
//! `cargo run --example closed_form_weights` and `cargo run --example
//! train_fairdro`. The `fairdro` binary wraps the harness as a small CLI
//! with `train`, `sweep`, `eval`, and `synth` subcommands.

pub mod dataset;
pub mod dro;
mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

pub use dataset::{LabeledDataset, SyntheticSpec};
pub use dro::{GroupWeights, UncertaintySpec};
pub use harness::{DataSource, RunOutput, SweepResult};
pub use metrics::{MetricsReport, Provenance};
pub use model::LinearModel;
pub use trainer::{TrainConfig, TrainHistory, Variant};
