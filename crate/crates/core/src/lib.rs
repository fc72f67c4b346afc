//! Conditional self-attention imputation (CSAI) for incomplete multivariate
//! time series.
//!
//! The crate is organized bottom-up:
//!
//! - [`tsdata`]: batches, time gaps, splits, normalization, ingestion and
//!   synthetic data
//! - [`masking`]: artificial masking plans for self-supervised training and
//!   evaluation
//! - [`numcore`]: tensors, a reverse-mode tape, layers and Adam
//! - [`brits`]: the bidirectional recurrent imputation backbone
//! - [`csai`]: median-anchored decay attention and the conditional hidden
//!   state initializer composed with the backbone
//! - [`trainer`]: losses, metrics, training, cross-validation and ablations
//! - [`report`]: JSON and delimited report emission

pub mod brits;
pub mod csai;
pub mod error;
pub mod masking;
pub mod numcore;
pub mod par;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod tsdata;

pub use error::{Error, Result};
