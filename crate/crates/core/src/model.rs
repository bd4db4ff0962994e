//! Model description, flat weight vectors and calibration data.
//!
//! A model is a stack of affine layers. Each layer's parameters live in one
//! contiguous segment of the flat vector: the weight matrix in row-major
//! order (`rows = out`, `cols = in`) followed by the bias, if any.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn code(self) -> u8 {
        match self {
            Nonlinearity::Relu => 0,
            Nonlinearity::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Nonlinearity::Relu),
            1 => Ok(Nonlinearity::Tanh),
            c => Err(Error::Format(format!("unknown nonlinearity code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn code(self) -> u8 {
        0
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LossKind::SoftmaxCrossEntropy),
            c => Err(Error::Format(format!("unknown loss code {c}"))),
        }
    }
}

/// Shape and activation of a multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ComputationSpec {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub nonlinearity: Nonlinearity,
    pub loss: LossKind,
    pub bias: bool,
}

impl ComputationSpec {
    pub fn new(d_in: usize, hidden: Vec<usize>, classes: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        let spec = ComputationSpec {
            d_in,
            hidden,
            classes,
            nonlinearity,
            loss: LossKind::SoftmaxCrossEntropy,
            bias: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 32 -> 64 -> 64 -> 8, ReLU.
    pub fn default_rig() -> Self {
        ComputationSpec::new(32, alloc::vec![64, 64], 8, Nonlinearity::Relu).expect("static spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("at least two affine layers are required".into()));
        }
        if self.d_in == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("all layer dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Widths of every activation, input first and logits last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.d_in);
        w.extend_from_slice(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn layout(&self) -> Layout {
        let widths = self.widths();
        let shapes = widths
            .windows(2)
            .enumerate()
            .map(|(i, p)| (format!("fc{}", i + 1), p[1], p[0], self.bias));
        Layout::from_shapes(shapes)
    }
}

/// One layer's slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSegment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerSegment {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.rows
        } else {
            0
        }
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    /// Bias entries use `col == cols`.
    pub fn local_index(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.rows {
            return None;
        }
        if col < self.cols {
            Some(row * self.cols + col)
        } else if col == self.cols && self.has_bias {
            Some(self.weight_len() + row)
        } else {
            None
        }
    }

    pub fn local_coord(&self, local: usize) -> (usize, usize) {
        if local < self.weight_len() {
            (local / self.cols, local % self.cols)
        } else {
            (local - self.weight_len(), self.cols)
        }
    }

    pub fn is_bias(&self, local: usize) -> bool {
        local >= self.weight_len()
    }
}

/// Position of one parameter. `col == cols` addresses the row's bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub layer: u32,
    pub row: u32,
    pub col: u32,
}

impl Coord {
    pub fn new(layer: usize, row: usize, col: usize) -> Self {
        Coord {
            layer: layer as u32,
            row: row as u32,
            col: col as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    segments: Vec<LayerSegment>,
    total: usize,
}

impl Layout {
    /// Builds contiguous segments from `(name, rows, cols, has_bias)`.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize, bool)>) -> Self {
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, rows, cols, has_bias)| {
                let seg = LayerSegment {
                    name: name.into(),
                    offset,
                    rows,
                    cols,
                    has_bias,
                };
                offset = seg.end();
                seg
            })
            .collect();
        Layout {
            segments,
            total: offset,
        }
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn segment(&self, layer: usize) -> &LayerSegment {
        &self.segments[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn flat_index(&self, c: Coord) -> Option<usize> {
        let seg = self.segments.get(c.layer as usize)?;
        seg.local_index(c.row as usize, c.col as usize).map(|l| seg.offset + l)
    }

    pub fn coord_of(&self, flat: usize) -> Option<Coord> {
        let layer = self.layer_of(flat)?;
        let seg = &self.segments[layer];
        let (r, c) = seg.local_coord(flat - seg.offset);
        Some(Coord::new(layer, r, c))
    }

    pub fn layer_of(&self, flat: usize) -> Option<usize> {
        if flat >= self.total {
            return None;
        }
        Some(self.segments.partition_point(|s| s.end() <= flat))
    }

    pub fn is_bias(&self, flat: usize) -> bool {
        match self.layer_of(flat) {
            Some(l) => {
                let seg = &self.segments[l];
                seg.is_bias(flat - seg.offset)
            }
            None => false,
        }
    }
}

/// The flat parameter vector `w` together with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    layout: Layout,
}

impl WeightVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Layout(format!(
                "vector has {} entries, layout covers {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(WeightVector { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = alloc::vec![0.0; layout.total_len()];
        WeightVector { values, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let seg = self.layout.segment(l);
        &self.values[seg.offset..seg.end()]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let seg = self.layout.segment(l).clone();
        &mut self.values[seg.offset..seg.end()]
    }

    /// Weight matrix (row-major) and bias of layer `l`.
    pub fn layer_parts(&self, l: usize) -> (&[f64], &[f64]) {
        let seg = self.layout.segment(l);
        let all = self.layer(l);
        all.split_at(seg.weight_len())
    }

    /// Splits into per-layer `(weights, bias)` pairs.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..self.layout.num_layers())
            .map(|l| {
                let (w, b) = self.layer_parts(l);
                (w.to_vec(), b.to_vec())
            })
            .collect()
    }

    pub fn flatten(layout: Layout, parts: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if parts.len() != layout.num_layers() {
            return Err(Error::Layout(format!(
                "{} layer parts for a {}-layer layout",
                parts.len(),
                layout.num_layers()
            )));
        }
        let mut values = Vec::with_capacity(layout.total_len());
        for (seg, (w, b)) in layout.segments().iter().zip(parts) {
            if w.len() != seg.weight_len() || b.len() != seg.bias_len() {
                return Err(Error::Layout(format!("layer {} has the wrong shape", seg.name)));
            }
            values.extend_from_slice(w);
            values.extend_from_slice(b);
        }
        WeightVector::new(layout, values)
    }

    pub fn check_same_layout(&self, other: &WeightVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Layout("weight vectors have different layouts".into()));
        }
        Ok(())
    }

    /// Rounds every entry onto the f32 grid.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
    }

    pub fn get(&self, c: Coord) -> Option<f64> {
        self.layout.flat_index(c).map(|i| self.values[i])
    }
}

/// Labelled samples defining `F(w)` as their mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    d_in: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl CalibSet {
    pub fn new(d_in: usize, classes: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("calibration set must hold at least one sample".into()));
        }
        if d_in == 0 || features.len() != d_in * labels.len() {
            return Err(Error::Config(format!(
                "{} features for {} samples of dimension {}",
                features.len(),
                labels.len(),
                d_in
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(CalibSet {
            d_in,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], u32) {
        (&self.features[i * self.d_in..(i + 1) * self.d_in], self.labels[i])
    }

    /// Samples `start..end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        CalibSet::new(
            self.d_in,
            self.classes,
            self.features[start * self.d_in..end * self.d_in].to_vec(),
            self.labels[start..end].to_vec(),
        )
    }

    pub fn concat(&self, other: &CalibSet) -> Result<Self> {
        if self.d_in != other.d_in || self.classes != other.classes {
            return Err(Error::Config(
                "cannot concatenate calibration sets of different shapes".into(),
            ));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        CalibSet::new(self.d_in, self.classes, features, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn default_rig_layout() {
        let spec = ComputationSpec::default_rig();
        let layout = spec.layout();
        assert_eq!(layout.num_layers(), 3);
        assert_eq!(layout.total_len(), 32 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8);
        let s = layout.segment(1);
        assert_eq!((s.rows, s.cols, s.offset), (64, 64, 32 * 64 + 64));
    }

    #[test]
    fn spec_needs_two_layers() {
        assert!(ComputationSpec::new(4, vec![], 2, Nonlinearity::Relu).is_err());
        assert!(ComputationSpec::new(4, vec![0], 2, Nonlinearity::Relu).is_err());
        assert!(ComputationSpec::new(4, vec![3], 2, Nonlinearity::Tanh).is_ok());
    }

    #[test]
    fn segments_cover_the_vector() {
        let layout = ComputationSpec::new(3, vec![5, 4], 2, Nonlinearity::Relu)
            .unwrap()
            .layout();
        let mut seen = vec![0u8; layout.total_len()];
        for (l, seg) in layout.segments().iter().enumerate() {
            for local in 0..seg.len() {
                let (r, c) = seg.local_coord(local);
                let flat = layout.flat_index(Coord::new(l, r, c)).unwrap();
                assert_eq!(flat, seg.offset + local);
                assert_eq!(layout.coord_of(flat), Some(Coord::new(l, r, c)));
                seen[flat] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert_eq!(layout.coord_of(layout.total_len()), None);
    }

    #[test]
    fn calib_validation() {
        assert!(CalibSet::new(2, 2, vec![], vec![]).is_err());
        assert!(CalibSet::new(2, 2, vec![0.0; 3], vec![0]).is_err());
        assert!(CalibSet::new(2, 2, vec![0.0; 2], vec![2]).is_err());
        assert!(CalibSet::new(2, 2, vec![0.0; 2], vec![1]).is_ok());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(vals in proptest::collection::vec(-10.0f64..10.0, 3 * 5 + 5 + 5 * 2 + 2)) {
            let layout = ComputationSpec::new(3, vec![5], 2, Nonlinearity::Relu).unwrap().layout();
            let w = WeightVector::new(layout.clone(), vals).unwrap();
            let back = WeightVector::flatten(layout, &w.unflatten()).unwrap();
            prop_assert_eq!(back, w);
        }
    }
}
