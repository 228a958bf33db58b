//! Temporal dataset shift detection for longitudinal patient panels.
//!
//! Two models for adjacent periods are compared on current-period data, at
//! population scope and inside a region discovered from per-sample loss
//! differences. Inference uses patient-clustered bootstrap intervals and
//! permutation tests, and a scan over many tasks controls the false discovery
//! rate with the Benjamini-Hochberg procedure.

pub mod analysis;
pub mod checks;
pub mod config;
pub mod error;
pub mod exact;
pub mod metric;
pub mod models;
pub mod optim;
pub mod panel;
pub mod resampling;
pub mod rng;
pub mod scan;
pub mod subpop;
pub mod synth;

pub use config::ScanConfig;
pub use error::{Error, Result};
