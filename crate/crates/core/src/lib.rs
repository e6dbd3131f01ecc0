//! Multi-expert decoding with learned output ensembling for long-tailed
//! semantic segmentation, at toy scale.
//!
//! The pipeline: generate a long-tailed synthetic corpus ([`synthgen`]),
//! train a shared backbone with one context module and head per expert on
//! expert-specific label masks ([`training`], [`model`], [`losses`]), fit a
//! per-expert per-category calibration that merges the experts
//! ([`ensemble`]), then score everything with a long-tail aware metrics
//! engine ([`metrics`]).

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod formats;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
