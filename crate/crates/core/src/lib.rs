//! Class-aware contrastive training for multi-class anomaly detection on a
//! feature-reconstruction backbone.
//!
//! The crate covers the whole pipeline: dataset scanning and synthetic data
//! ([`data`]), the reconstruction model ([`model`]), the training objectives
//! ([`losses`]), pseudo-class clustering ([`pseudo`]), anomaly maps
//! ([`scoring`]), evaluation ([`metrics`]) and the optimization loop
//! ([`train`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod grid;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod scoring;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
