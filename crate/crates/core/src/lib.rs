//! Supervised spike inference from calcium fluorescence.
//!
//! The crate learns a Poisson rate model mapping windows of preprocessed
//! fluorescence to per-bin spike counts, and ships the evaluation machinery
//! used to benchmark it: preprocessing, PCA features, spike-triggered mixture
//! / LNP / two-layer network rate models, an L-BFGS trainer, correlation /
//! information gain / AUC metrics, a synthetic data generator, two reference
//! baselines and a cross-validation harness.
//!
//! Rates are always expressed as expected spikes per model bin (10 ms at the
//! default 100 Hz grid).

pub mod baselines;
pub mod error;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod preprocess;
pub mod signal_io;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Version tag written into every serialized artifact.
pub const FORMAT_VERSION: u32 = 1;

/// Default common bin rate of the model grid.
pub const DEFAULT_BIN_RATE_HZ: f64 = 100.0;
