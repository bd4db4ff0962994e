use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kmeans::quantize_kmeans;
use super::packing::PackedCodes;
use super::sparse::{SparseTriplets, Triplet};
use super::uniform::{groups_per_row, quantize_uniform, UniformCodes};
use super::{Preprocess, QuantConfig, QuantMode, StorageReport};
use crate::error::{Error, Result};
use crate::model::{Layout, WeightVector};
use crate::rng;
use crate::sensitivity::{MetricKind, SensitivityVector};

/// Dense low-bit part of one layer. Codes run over the weight matrix in
/// row-major order, then over the bias.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseCodes {
    Uniform {
        group_size: usize,
        codes: PackedCodes,
        /// Weight groups (row-major over `(row, group)`) then bias groups.
        scales: Vec<f32>,
        /// Per-input-channel divisors; `None` for identity preprocessing.
        col_scales: Option<Vec<f32>>,
    },
    Codebook {
        codes: PackedCodes,
        codebook: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
    pub dense: DenseCodes,
}

impl QuantizedLayer {
    pub fn len(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codes(&self) -> &PackedCodes {
        match &self.dense {
            DenseCodes::Uniform { codes, .. } | DenseCodes::Codebook { codes, .. } => codes,
        }
    }

    /// Number of steps the layer stores for `group_size`.
    pub fn uniform_scale_count(rows: usize, cols: usize, has_bias: bool, group_size: usize) -> usize {
        rows * groups_per_row(cols, group_size) + if has_bias { rows.div_ceil(group_size) } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes().len() != self.len() {
            return Err(Error::Format(format!(
                "layer {} holds {} codes for {} parameters",
                self.name,
                self.codes().len(),
                self.len()
            )));
        }
        match &self.dense {
            DenseCodes::Uniform {
                group_size,
                scales,
                col_scales,
                ..
            } => {
                if *group_size == 0
                    || scales.len() != Self::uniform_scale_count(self.rows, self.cols, self.has_bias, *group_size)
                {
                    return Err(Error::Format(format!("layer {} has a bad step table", self.name)));
                }
                if col_scales.as_ref().is_some_and(|c| c.len() != self.cols) {
                    return Err(Error::Format(format!(
                        "layer {} has a bad channel scale table",
                        self.name
                    )));
                }
            }
            DenseCodes::Codebook { codes, codebook } => {
                if codebook.is_empty() || (0..codes.len()).any(|i| codes.get_unsigned(i) as usize >= codebook.len()) {
                    return Err(Error::Format(format!(
                        "layer {} has codebook indices out of range",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dequantized value at a local (segment) index.
    pub fn dequant_at(&self, local: usize) -> f64 {
        let wl = self.rows * self.cols;
        match &self.dense {
            DenseCodes::Uniform {
                group_size,
                codes,
                scales,
                col_scales,
            } => {
                let code = f64::from(codes.get_signed(local));
                if local < wl {
                    let (r, c) = (local / self.cols, local % self.cols);
                    let s = f64::from(scales[r * groups_per_row(self.cols, *group_size) + c / group_size]);
                    let v = s * code;
                    match col_scales {
                        Some(cs) => v / f64::from(cs[c]),
                        None => v,
                    }
                } else {
                    let r = local - wl;
                    let base = self.rows * groups_per_row(self.cols, *group_size);
                    f64::from(scales[base + r / group_size]) * code
                }
            }
            DenseCodes::Codebook { codes, codebook } => f64::from(codebook[codes.get_unsigned(local) as usize]),
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.dequant_at(i)).collect()
    }

    /// `y += W_dense x`, straight from the codes.
    pub(crate) fn dense_matvec_into(&self, x: &[f64], y: &mut [f64]) {
        match &self.dense {
            DenseCodes::Uniform {
                group_size,
                codes,
                scales,
                col_scales,
            } => {
                let scaled: Vec<f64>;
                let xs = match col_scales {
                    Some(cs) => {
                        scaled = x.iter().zip(cs).map(|(a, &s)| a / f64::from(s)).collect();
                        &scaled[..]
                    }
                    None => x,
                };
                let gpr = groups_per_row(self.cols, *group_size);
                for (r, yr) in y.iter_mut().enumerate() {
                    for g in 0..gpr {
                        let lo = g * group_size;
                        let hi = (lo + group_size).min(self.cols);
                        let acc: f64 = (lo..hi)
                            .zip(&xs[lo..hi])
                            .map(|(c, x)| f64::from(codes.get_signed(r * self.cols + c)) * x)
                            .sum();
                        *yr += f64::from(scales[r * gpr + g]) * acc;
                    }
                }
            }
            DenseCodes::Codebook { codes, codebook } => {
                for (r, yr) in y.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (c, xc) in x.iter().enumerate() {
                        acc += f64::from(codebook[codes.get_unsigned(r * self.cols + c) as usize]) * xc;
                    }
                    *yr += acc;
                }
            }
        }
    }
}

/// Provenance of the sparse overlays. Stored in single precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantMeta {
    /// Outlier ratio, percent of all parameters.
    pub r_o: f32,
    /// Significant-weight ratio, percent of all parameters.
    pub r_s: f32,
    /// Outlier allocation temperature.
    pub t: f32,
    /// Significant-weight step, percent of all parameters.
    pub beta: f32,
    pub seed: u64,
}

/// `Q(w - w_o, v) + w_o + w_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: QuantConfig,
    pub layers: Vec<QuantizedLayer>,
    pub outliers: SparseTriplets,
    pub significant: SparseTriplets,
    pub meta: QuantMeta,
}

impl QuantizedModel {
    pub fn layout(&self) -> Layout {
        Layout::from_shapes(self.layers.iter().map(|l| (l.name.clone(), l.rows, l.cols, l.has_bias)))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Checks code counts, table sizes, overlay bounds and disjointness.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        let layout = self.layout();
        for t in self.outliers.iter().chain(self.significant.iter()) {
            if layout.flat_index(t.coord).is_none() {
                return Err(Error::Format(format!("overlay coordinate {:?} out of bounds", t.coord)));
            }
        }
        if !self.outliers.is_disjoint(&self.significant) {
            return Err(Error::Format("outlier and significant overlays overlap".into()));
        }
        Ok(())
    }

    pub fn layer_overlays(&self, l: usize) -> [&[Triplet]; 2] {
        [self.outliers.layer(l), self.significant.layer(l)]
    }

    pub fn with_overlays(&self, outliers: SparseTriplets, significant: SparseTriplets) -> Result<Self> {
        let qm = QuantizedModel {
            outliers,
            significant,
            ..self.clone()
        };
        qm.validate()?;
        Ok(qm)
    }

    pub fn storage(&self) -> StorageReport {
        let mut code_bits = 0;
        let mut side_bits = 0;
        for l in &self.layers {
            code_bits += l.codes().len() * l.codes().bits() as usize;
            side_bits += 32
                * match &l.dense {
                    DenseCodes::Uniform { scales, col_scales, .. } => {
                        scales.len() + col_scales.as_ref().map_or(0, |c| c.len())
                    }
                    DenseCodes::Codebook { codebook, .. } => codebook.len(),
                };
        }
        StorageReport {
            params: self.num_params(),
            code_bits,
            side_bits,
            overlay_nonzeros: self.outliers.len() + self.significant.len(),
        }
    }
}

fn channel_scales(v: &SensitivityVector, offset: usize, cols: usize, exponent: f64) -> Vec<f32> {
    let stats = &v.values[offset..offset + cols];
    let peak = stats.iter().fold(0.0f64, |m, &a| m.max(a));
    let floor = if peak > 0.0 { peak * 1e-6 } else { 1.0 };
    let raw: Vec<f64> = stats.iter().map(|&a| libm::pow(a.max(floor), exponent)).collect();
    let mean = raw.iter().sum::<f64>() / cols as f64;
    raw.iter().map(|&s| (s / mean) as f32).collect()
}

/// Quantizes every layer of `w`. Coordinates flagged in `exclude` (length
/// `D`) are zeroed before fitting and coding; their dense codes are
/// meaningless and must be covered by an overlay.
pub fn quantize_model(
    w: &WeightVector,
    cfg: &QuantConfig,
    v: &SensitivityVector,
    exclude: &[bool],
) -> Result<QuantizedModel> {
    cfg.validate()?;
    if v.values.len() != w.len() || exclude.len() != w.len() {
        return Err(Error::Layout(
            "sensitivity and exclusion masks must match the weight vector".into(),
        ));
    }
    if matches!(cfg.preprocess, Preprocess::ActivationScale { .. }) && v.kind != MetricKind::Activation {
        return Err(Error::Config(
            "activation scaling needs an activation sensitivity vector".into(),
        ));
    }
    let layout = w.layout();
    let mut layers = Vec::with_capacity(layout.num_layers());
    for (l, seg) in layout.segments().iter().enumerate() {
        let vals = w.layer(l);
        let ex = &exclude[seg.offset..seg.end()];
        let wl = seg.weight_len();
        let dense = match cfg.mode {
            QuantMode::UniformGroup { group_size } => {
                let col_scales = match cfg.preprocess {
                    Preprocess::Identity => None,
                    Preprocess::ActivationScale { exponent } => Some(channel_scales(v, seg.offset, seg.cols, exponent)),
                };
                let scaled: Vec<f64> = match &col_scales {
                    Some(cs) => (0..wl).map(|i| vals[i] * f64::from(cs[i % seg.cols])).collect(),
                    None => vals[..wl].to_vec(),
                };
                let mut q = quantize_uniform(&scaled, seg.rows, seg.cols, cfg.bits, cfg.range, group_size, &ex[..wl]);
                if seg.has_bias {
                    let UniformCodes { codes, scales } =
                        quantize_uniform(&vals[wl..], 1, seg.rows, cfg.bits, cfg.range, group_size, &ex[wl..]);
                    q.codes.extend(codes);
                    q.scales.extend(scales);
                }
                DenseCodes::Uniform {
                    group_size,
                    codes: PackedCodes::from_signed(cfg.code_bits(), &q.codes),
                    scales: q.scales,
                    col_scales,
                }
            }
            QuantMode::KMeansCodebook { iters } => {
                let seed = rng::derive_seed(cfg.seed, &format!("kmeans/{}", seg.name));
                let fit = quantize_kmeans(
                    vals,
                    &v.values[seg.offset..seg.end()],
                    ex,
                    cfg.codebook_size(),
                    seed,
                    iters,
                );
                DenseCodes::Codebook {
                    codes: PackedCodes::from_unsigned(cfg.bits, fit.assignments.iter().copied()),
                    codebook: fit.codebook.iter().map(|&c| c as f32).collect(),
                }
            }
        };
        layers.push(QuantizedLayer {
            name: seg.name.clone(),
            rows: seg.rows,
            cols: seg.cols,
            has_bias: seg.has_bias,
            dense,
        });
    }
    Ok(QuantizedModel {
        config: *cfg,
        layers,
        outliers: SparseTriplets::empty(),
        significant: SparseTriplets::empty(),
        meta: QuantMeta {
            seed: cfg.seed,
            ..QuantMeta::default()
        },
    })
}

/// Dense dequantization with overlay values substituted at their
/// coordinates.
pub fn reconstruct(qm: &QuantizedModel) -> Result<WeightVector> {
    let layout = qm.layout();
    let mut values = vec![0.0; layout.total_len()];
    for (seg, layer) in layout.segments().iter().zip(&qm.layers) {
        layer.validate()?;
        for (i, v) in values[seg.offset..seg.end()].iter_mut().enumerate() {
            *v = layer.dequant_at(i);
        }
    }
    for t in qm.outliers.iter().chain(qm.significant.iter()) {
        let i = layout
            .flat_index(t.coord)
            .ok_or_else(|| Error::Format(format!("overlay coordinate {:?} out of bounds", t.coord)))?;
        values[i] = f64::from(t.value);
    }
    WeightVector::new(layout, values)
}
