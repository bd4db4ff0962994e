//! Grouped uniform integer quantization.
//!
//! Each row is cut into groups of `group_size` consecutive columns (the
//! tail group may be shorter). A group with largest magnitude `m` gets the
//! step `s = m / q` where `q` is the largest code of the integer range, and
//! every element is coded as `round_half_even(w / s)` clamped to `[-q, q]`.

use alloc::vec::Vec;

use super::IntRange;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformCodes {
    pub codes: Vec<i32>,
    /// One step per group, row-major over `(row, group)`.
    pub scales: Vec<f32>,
}

pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

/// Quantizes a `rows x cols` row-major matrix. Entries flagged in `exclude`
/// are treated as zero, both when fitting the step and when coding.
pub fn quantize_uniform(
    values: &[f64],
    rows: usize,
    cols: usize,
    bits: u8,
    range: IntRange,
    group_size: usize,
    exclude: &[bool],
) -> UniformCodes {
    debug_assert_eq!(values.len(), rows * cols);
    debug_assert_eq!(exclude.len(), values.len());
    let qmax = range.max_code(bits);
    let gpr = groups_per_row(cols, group_size);
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(rows * gpr);
    for r in 0..rows {
        for g in 0..gpr {
            let lo = r * cols + g * group_size;
            let hi = r * cols + ((g + 1) * group_size).min(cols);
            let masked = |i: usize| if exclude[i] { 0.0 } else { values[i] };
            let m = (lo..hi).fold(0.0f64, |m, i| m.max(masked(i).abs()));
            // The step is fitted in f64 and stored in f32.
            let step = m / f64::from(qmax);
            scales.push(step as f32);
            for i in lo..hi {
                let code = if step > 0.0 {
                    libm::rint(masked(i) / step).clamp(-f64::from(qmax), f64::from(qmax)) as i32
                } else {
                    0
                };
                codes.push(code);
            }
        }
    }
    UniformCodes { codes, scales }
}

pub fn dequantize_uniform(codes: &UniformCodes, rows: usize, cols: usize, group_size: usize) -> Vec<f64> {
    let gpr = groups_per_row(cols, group_size);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = f64::from(codes.scales[r * gpr + c / group_size]);
            out.push(s * f64::from(codes.codes[r * cols + c]));
        }
    }
    out
}
