//! Family-aware ensemble aggregation and diagnostics for multi-model
//! answer prediction.
//!
//! The crate turns a directory of per-model answer dumps into scored
//! matrices, runs family-structured voting methods over them, trains a
//! learned candidate scorer, and produces the diagnostic reports
//! (difficulty taxonomy, error-correlation spectra, clustering, gap
//! decomposition) that explain where ensemble headroom lives.

pub mod analysis;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod gbdt;
pub mod lcs;
pub mod manifest;
pub mod pipeline;
pub mod scoring;
pub mod stats;
pub mod synth;
pub mod voting;

pub use error::{FamvoteError, Result};
