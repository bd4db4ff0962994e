//! Dense quantizers, sparse overlays and the dense-and-sparse model.
//!
//! A [`QuantizedModel`] stores, per layer, low-bit dense codes (grouped
//! uniform steps or a k-means codebook) plus two sparse overlays of
//! full-precision values: outliers detached before quantization and
//! significant weights restored after it.

mod kmeans;
mod layer;
mod packing;
mod sparse;
mod uniform;

pub use kmeans::{quantize_kmeans, weighted_objective, KMeansFit};
pub use layer::{quantize_model, reconstruct, DenseCodes, QuantMeta, QuantizedLayer, QuantizedModel};
pub use packing::{packed_len, PackedCodes};
pub use sparse::{dense_matvec, sparse_matvec, SparseTriplets, Triplet};
pub use uniform::{dequantize_uniform, groups_per_row, quantize_uniform, UniformCodes};

use alloc::format;

use crate::error::{Error, Result};

/// Integer range of uniform codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntRange {
    /// Step `max|w| / (2^N - 1)`; codes span `[-(2^N-1), 2^N-1]` and need
    /// `N + 1` bits.
    FullScale,
    /// Step `max|w| / (2^(N-1) - 1)`; codes fit in `N` signed bits.
    SymmetricStandard,
}

impl IntRange {
    pub fn max_code(self, bits: u8) -> i32 {
        match self {
            IntRange::FullScale => (1 << bits) - 1,
            IntRange::SymmetricStandard => (1 << (bits - 1)) - 1,
        }
    }

    pub fn code_bits(self, bits: u8) -> u8 {
        match self {
            IntRange::FullScale => bits + 1,
            IntRange::SymmetricStandard => bits,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            IntRange::FullScale => 0,
            IntRange::SymmetricStandard => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(IntRange::FullScale),
            1 => Ok(IntRange::SymmetricStandard),
            c => Err(Error::Format(format!("unknown integer range code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    UniformGroup {
        group_size: usize,
    },
    /// `2^bits` centroids per layer.
    KMeansCodebook {
        iters: usize,
    },
}

impl QuantMode {
    pub fn code(self) -> u8 {
        match self {
            QuantMode::UniformGroup { .. } => 0,
            QuantMode::KMeansCodebook { .. } => 1,
        }
    }
}

/// Transformation applied to a layer's weights before uniform coding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocess {
    Identity,
    /// Multiplies input channel `c` by `a_c^exponent` (normalised to mean 1)
    /// before coding and divides it out on dequantization. Needs an
    /// activation sensitivity vector.
    ActivationScale {
        exponent: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub mode: QuantMode,
    pub range: IntRange,
    pub preprocess: Preprocess,
    /// Seeds k-means initialisation.
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 3,
            mode: QuantMode::UniformGroup { group_size: 32 },
            range: IntRange::SymmetricStandard,
            preprocess: Preprocess::Identity,
            seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        match self.mode {
            QuantMode::UniformGroup { group_size: 0 } => {
                return Err(Error::Config("group size must be >= 1".into()));
            }
            QuantMode::KMeansCodebook { .. } if !matches!(self.preprocess, Preprocess::Identity) => {
                return Err(Error::Config("activation scaling applies to uniform mode only".into()));
            }
            _ => {}
        }
        if let Preprocess::ActivationScale { exponent } = self.preprocess {
            if !exponent.is_finite() || exponent < 0.0 {
                return Err(Error::Config("activation exponent must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn codebook_size(&self) -> usize {
        1usize << self.bits
    }

    /// Bits of one stored dense code.
    pub fn code_bits(&self) -> u8 {
        match self.mode {
            QuantMode::UniformGroup { .. } => self.range.code_bits(self.bits),
            QuantMode::KMeansCodebook { .. } => self.bits,
        }
    }
}

/// Accounting cost of one overlay nonzero: 16-bit row, 16-bit column and a
/// 16-bit value.
pub const OVERLAY_BITS_PER_NONZERO: usize = 48;

/// Bits spent on a model, split by part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageReport {
    pub params: usize,
    pub code_bits: usize,
    /// Steps, channel scales and codebooks, 32 bits each.
    pub side_bits: usize,
    pub overlay_nonzeros: usize,
}

impl StorageReport {
    pub fn overlay_bits(&self) -> usize {
        self.overlay_nonzeros * OVERLAY_BITS_PER_NONZERO
    }

    pub fn total_bits(&self) -> usize {
        self.code_bits + self.side_bits + self.overlay_bits()
    }

    pub fn bits_per_weight(&self) -> f64 {
        self.total_bits() as f64 / self.params as f64
    }

    pub fn dense_bits_per_weight(&self) -> f64 {
        (self.code_bits + self.side_bits) as f64 / self.params as f64
    }

    pub fn overlay_bits_per_weight(&self) -> f64 {
        overlay_bits_per_weight(self.overlay_nonzeros, self.params)
    }
}

pub fn overlay_bits_per_weight(nonzeros: usize, params: usize) -> f64 {
    (nonzeros * OVERLAY_BITS_PER_NONZERO) as f64 / params as f64
}
