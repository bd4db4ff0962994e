//! File formats, configuration, reports and command implementations for
//! [`requant_core`].
//!
//! - [`checkpoint`] -- `RQMD` model checkpoints and `RQCL` calibration sets
//! - [`artifact`] -- `RQQT` quantized models with sparse overlays
//! - [`config`] -- TOML experiment configuration and its hash
//! - [`report`] -- tab-separated tables
//! - [`commands`] -- `train`, `quantize`, `taylor-study`, `pqi`, `requant`,
//!   `eval`

pub mod artifact;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;
mod wire;

pub use error::{Error, Result};
