//! Auditing engine for social bias in contrastive vision-language embeddings.
//!
//! The engine works on exported image and prompt embeddings: it runs
//! zero-shot probes, measures demographic skew and harm rates with bootstrap
//! intervals, removes attribute directions from prompt embeddings by
//! projection, and runs the neutral-image, calibration, and template controls.

pub mod audit;
pub mod catalog;
pub mod controls;
pub mod debias;
pub mod embedding_store;
pub mod error;
pub mod metrics;
mod num;
pub mod stats;
pub mod zeroshot;

pub use error::{Error, Result};
