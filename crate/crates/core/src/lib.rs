//! Completion of sparse patient×measurement tables with a Bayesian
//! bilinear latent-trait model.
//!
//! Each cell is modeled as the dot product of a per-patient and a
//! per-measurement trait vector plus scalar biases for both sides, with
//! Gaussian priors on every latent and Gaussian observation noise.
//! Inference is coordinate-ascent variational inference with closed-form
//! conjugate updates, which keeps the ELBO monotone and the whole pipeline
//! deterministic under fixed seeds.
//!
//! The crate provides, in order of the pipeline:
//! - [`data`]: CSV ingestion with a missingness mask, per-column min-max
//!   normalization, support filtering, and seeded fold splitting;
//! - [`model`]: hyperparameters, the variational posterior, prediction,
//!   and a synthetic-data generator that mirrors the generative process;
//! - [`inference`]: the CAVI updates, ELBO, and the fit loop;
//! - [`eval`]: cross-validation, per-measurement error reports,
//!   mean-imputation baselines, and the prior-mean grid search.

pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;

pub use data::{
    apply_manifest, load_csv, write_dense_csv, write_sparse_csv, ColumnKind, ColumnMeta,
    ColumnScale, Entry, FoldAssignment, MissingTokens, MissingnessStats, NormalizationParams,
    ObservationMatrix,
};
pub use error::{Error, Result};
pub use eval::{
    baseline_predict, classify, cross_validate, cross_validate_baseline, grid_search,
    grid_values, mae_report, BaselineKind, BaselineSummary, ColumnClass, ColumnReport,
    EntryError, EvalReport, GridMode, GridPoint, GridSearchResult, NormScope, Summary,
};
pub use inference::{elbo, fit, sweep, update_bias, update_trait_vector, FitConfig, FitResult,
    FitResultJson, Side, SparseView};
pub use model::{
    generate_synthetic, BiasFactor, Hyperparams, StateJson, SyntheticInstance, TraitFactor,
    VariationalState,
};
