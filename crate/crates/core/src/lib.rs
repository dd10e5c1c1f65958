//! Progressive self-guided (PSG) loss pipeline for salient object detection.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`ndtensor`]),
//! binary and soft morphology including the PSG target generator
//! ([`morphology`]), the training losses ([`losses`]), a desk-scale FPN model
//! with multi-scale feature aggregation modules ([`model`]), data ingestion and
//! a synthetic dataset generator ([`dataio`]), SOD evaluation ([`metrics`]), a
//! deterministic trainer ([`trainer`]) and a numeric check of the combined-step
//! lemma ([`lemma`]).

pub mod config;
pub mod dataio;
pub mod error;
pub mod lemma;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod ndtensor;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
