//! Experiment driver for the snnq toolkit: training, trace estimation,
//! quantized fine-tuning, bit allocation, evaluation and reporting.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod record;

pub use error::{CliError, Result};
