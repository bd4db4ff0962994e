//! Sorted coordinate triplets and the dense-and-sparse matvec.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layer::QuantizedLayer;
use crate::error::{Error, Result};
use crate::model::Coord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub coord: Coord,
    pub value: f32,
}

/// Full-precision values at strictly increasing `(layer, row, col)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseTriplets {
    entries: Vec<Triplet>,
}

impl SparseTriplets {
    pub fn new(entries: Vec<Triplet>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| w[0].coord >= w[1].coord) {
            return Err(Error::Format(format!(
                "overlay coordinates out of order or duplicated at {:?}",
                w[1].coord
            )));
        }
        Ok(SparseTriplets { entries })
    }

    pub fn from_unsorted(mut entries: Vec<Triplet>) -> Result<Self> {
        entries.sort_by_key(|t| t.coord);
        SparseTriplets::new(entries)
    }

    pub fn empty() -> Self {
        SparseTriplets::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Triplet] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.entries.iter()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.entries.binary_search_by_key(&c, |t| t.coord).is_ok()
    }

    /// Entries of one layer.
    pub fn layer(&self, layer: usize) -> &[Triplet] {
        let l = layer as u32;
        let lo = self.entries.partition_point(|t| t.coord.layer < l);
        let hi = self.entries.partition_point(|t| t.coord.layer <= l);
        &self.entries[lo..hi]
    }

    /// Union of two disjoint sets.
    pub fn merged(&self, other: &SparseTriplets) -> Result<Self> {
        let mut all = self.entries.clone();
        all.extend_from_slice(&other.entries);
        SparseTriplets::from_unsorted(all)
    }

    pub fn is_disjoint(&self, other: &SparseTriplets) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].coord.cmp(&other.entries[j].coord) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => return false,
            }
        }
        true
    }
}

/// `y = W x` for a row-major `rows x cols` matrix.
pub fn dense_matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `y = W̃ x` where `W̃` is the layer's dequantized weight matrix with the
/// overlay values substituted at their coordinates. The dense part is
/// computed straight from the codes (one multiply by the step per group);
/// each overlay entry then contributes `(value - dense) * x[col]`. Bias
/// entries in the overlays are ignored.
pub fn sparse_matvec(layer: &QuantizedLayer, overlays: &[&[Triplet]], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.cols {
        return Err(Error::Config(format!(
            "input has {} entries, layer {} has {} columns",
            x.len(),
            layer.name,
            layer.cols
        )));
    }
    let mut y = vec![0.0; layer.rows];
    layer.dense_matvec_into(x, &mut y);
    for overlay in overlays {
        for t in overlay.iter() {
            let (r, c) = (t.coord.row as usize, t.coord.col as usize);
            if r >= layer.rows || c > layer.cols || (c == layer.cols && !layer.has_bias) {
                return Err(Error::Format(format!("overlay coordinate {:?} out of bounds", t.coord)));
            }
            if c == layer.cols {
                continue;
            }
            let local = r * layer.cols + c;
            y[r] += (f64::from(t.value) - layer.dequant_at(local)) * x[c];
        }
    }
    Ok(y)
}
