//! Physiology-based fake video detection.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dissonance;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod physio;
pub mod physmaps;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
