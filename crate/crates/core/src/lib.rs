//! Sensitivity analysis and dense-and-sparse quantization for small
//! feed-forward models.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It provides:
//!
//! - [`model`] -- computation specs, flat weight vectors with a layer layout,
//!   and calibration sets
//! - [`autodiff`] -- exact losses, gradients, per-sample gradients and
//!   activation statistics of a multi-layer perceptron
//! - [`zoo`] -- synthetic data, deterministic SGD training, interpolation
//! - [`quant`] -- grouped uniform and weighted k-means codebook quantizers,
//!   sparse overlays, reconstruction and the dense-and-sparse matvec kernel
//! - [`sensitivity`] -- gradient / activation / Fisher metrics and the
//!   Taylor-expansion loss predictors
//! - [`pqi`] -- the post-quantization integral along the straight path
//!   between the original and the quantized weights
//! - [`requant`] -- temperature-searched outlier allocation, greedy
//!   significant-weight detach and the full pipeline
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod model;
pub mod pqi;
pub mod quant;
pub mod requant;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{CalibSet, ComputationSpec, Coord, LayerSegment, Layout, LossKind, Nonlinearity, WeightVector};
pub use pqi::{PqiResult, QuadratureRule};
pub use quant::{QuantConfig, QuantMode, QuantizedModel, SparseTriplets};
pub use sensitivity::{FisherSign, MetricKind, SensitivityVector};
