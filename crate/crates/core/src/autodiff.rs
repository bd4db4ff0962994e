//! Reverse-mode differentiation of the MLP loss.
//!
//! The graph is fixed (affine -> nonlinearity -> ... -> affine -> softmax
//! cross-entropy), so the reverse sweep is written out layer by layer rather
//! than recorded on a tape. Sample contributions are always reduced in
//! ascending sample order, which makes every result bit-reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{CalibSet, ComputationSpec, Nonlinearity, WeightVector};

/// Gradient of the loss with respect to every entry of a [`WeightVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

pub(crate) fn check_inputs(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<()> {
    spec.validate()?;
    if *w.layout() != spec.layout() {
        return Err(Error::Config(
            "weight layout does not match the computation spec".into(),
        ));
    }
    if calib.d_in() != spec.d_in {
        return Err(Error::Config(format!(
            "calibration features have dimension {}, model expects {}",
            calib.d_in(),
            spec.d_in
        )));
    }
    if calib.classes() > spec.classes {
        return Err(Error::Config(format!(
            "calibration set has {} classes, model outputs {}",
            calib.classes(),
            spec.classes
        )));
    }
    Ok(())
}

/// Scratch buffers for one sample's forward and reverse sweep.
struct Workspace {
    /// `acts[l]` is the input of layer `l`; `acts[0]` is the sample.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one holds the logits.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    back: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ComputationSpec) -> Self {
        let widths = spec.widths();
        let max = widths.iter().copied().max().unwrap_or(0);
        Workspace {
            acts: widths[..widths.len() - 1].iter().map(|&n| vec![0.0; n]).collect(),
            pre: widths[1..].iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::with_capacity(max),
            back: Vec::with_capacity(max),
        }
    }
}

fn activate(kind: Nonlinearity, z: f64) -> f64 {
    match kind {
        Nonlinearity::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => libm::tanh(z),
    }
}

/// Derivative expressed through the pre-activation; ReLU'(0) = 0.
fn activate_grad(kind: Nonlinearity, z: f64) -> f64 {
    match kind {
        Nonlinearity::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Tanh => {
            let t = libm::tanh(z);
            1.0 - t * t
        }
    }
}

fn forward(spec: &ComputationSpec, w: &WeightVector, x: &[f64], ws: &mut Workspace) {
    let layers = spec.num_layers();
    ws.acts[0].copy_from_slice(x);
    for l in 0..layers {
        let seg = w.layout().segment(l);
        let (weights, bias) = w.layer_parts(l);
        let (input, rest) = ws.acts.split_at_mut(l + 1);
        let input = &input[l];
        let z = &mut ws.pre[l];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &weights[r * seg.cols..(r + 1) * seg.cols];
            let mut acc = if seg.has_bias { bias[r] } else { 0.0 };
            for (a, b) in row.iter().zip(input) {
                acc += a * b;
            }
            *zr = acc;
        }
        if l + 1 < layers {
            for (h, &zr) in rest[0].iter_mut().zip(z.iter()) {
                *h = activate(spec.nonlinearity, zr);
            }
        }
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(logits.iter().map(|&z| libm::exp(z - m)).sum::<f64>())
}

fn sample_loss(logits: &[f64], label: u32) -> f64 {
    log_sum_exp(logits) - logits[label as usize]
}

/// Adds the sample's gradient into `out`. Requires a preceding `forward`.
fn backward(spec: &ComputationSpec, w: &WeightVector, label: u32, ws: &mut Workspace, out: &mut [f64]) {
    let layers = spec.num_layers();
    let logits = &ws.pre[layers - 1];
    let lse = log_sum_exp(logits);
    ws.delta.clear();
    ws.delta.extend(logits.iter().map(|&z| libm::exp(z - lse)));
    ws.delta[label as usize] -= 1.0;

    for l in (0..layers).rev() {
        let seg = w.layout().segment(l);
        let input = &ws.acts[l];
        let g = &mut out[seg.offset..seg.end()];
        let (gw, gb) = g.split_at_mut(seg.weight_len());
        for (r, &d) in ws.delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut gw[r * seg.cols..(r + 1) * seg.cols];
            for (gi, &a) in row.iter_mut().zip(input) {
                *gi += d * a;
            }
            if seg.has_bias {
                gb[r] += d;
            }
        }
        if l == 0 {
            break;
        }
        let (weights, _) = w.layer_parts(l);
        ws.back.clear();
        ws.back.resize(seg.cols, 0.0);
        for (r, &d) in ws.delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &weights[r * seg.cols..(r + 1) * seg.cols];
            for (b, &a) in ws.back.iter_mut().zip(row) {
                *b += d * a;
            }
        }
        let z_prev = &ws.pre[l - 1];
        ws.delta.clear();
        ws.delta.extend(
            ws.back
                .iter()
                .zip(z_prev)
                .map(|(&b, &z)| b * activate_grad(spec.nonlinearity, z)),
        );
    }
}

/// Per-sample losses `f(w; x_i)` in sample order.
pub fn sample_losses(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<Vec<f64>> {
    check_inputs(spec, w, calib)?;
    let mut ws = Workspace::new(spec);
    Ok((0..calib.len())
        .map(|i| {
            let (x, y) = calib.sample(i);
            forward(spec, w, x, &mut ws);
            sample_loss(&ws.pre[spec.num_layers() - 1], y)
        })
        .collect())
}

/// `F(w)`: the mean per-sample cross-entropy.
pub fn forward_loss(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<f64> {
    let losses = sample_losses(spec, w, calib)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Calls `visit(i, loss_i, grad_i)` for every sample in order. The gradient
/// buffer is reused between calls.
pub fn for_each_sample_grad(
    spec: &ComputationSpec,
    w: &WeightVector,
    calib: &CalibSet,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<()> {
    check_inputs(spec, w, calib)?;
    let mut ws = Workspace::new(spec);
    let mut g = vec![0.0; w.len()];
    for i in 0..calib.len() {
        let (x, y) = calib.sample(i);
        forward(spec, w, x, &mut ws);
        let loss = sample_loss(&ws.pre[spec.num_layers() - 1], y);
        g.iter_mut().for_each(|v| *v = 0.0);
        backward(spec, w, y, &mut ws, &mut g);
        visit(i, loss, &g);
    }
    Ok(())
}

/// `F(w)` and `∇F(w)` in one sweep.
pub fn loss_and_grad(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<(f64, GradientVector)> {
    check_inputs(spec, w, calib)?;
    let mut ws = Workspace::new(spec);
    let mut g = vec![0.0; w.len()];
    let mut loss = 0.0;
    for i in 0..calib.len() {
        let (x, y) = calib.sample(i);
        forward(spec, w, x, &mut ws);
        loss += sample_loss(&ws.pre[spec.num_layers() - 1], y);
        backward(spec, w, y, &mut ws, &mut g);
    }
    let n = calib.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, GradientVector(g)))
}

pub fn grad(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<GradientVector> {
    loss_and_grad(spec, w, calib).map(|(_, g)| g)
}

/// `∇f(w; x_i)` for every sample. Memory is `n * D`; prefer
/// [`for_each_sample_grad`] when only a reduction is needed.
pub fn per_sample_grads(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<Vec<GradientVector>> {
    let mut out = Vec::with_capacity(calib.len());
    for_each_sample_grad(spec, w, calib, |_, _, g| out.push(GradientVector(g.to_vec())))?;
    Ok(out)
}

/// Mean absolute input activation of every affine layer, per input channel.
pub fn activation_stats(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<Vec<Vec<f64>>> {
    check_inputs(spec, w, calib)?;
    let mut ws = Workspace::new(spec);
    let mut sums: Vec<Vec<f64>> = ws.acts.iter().map(|a| vec![0.0; a.len()]).collect();
    for i in 0..calib.len() {
        let (x, _) = calib.sample(i);
        forward(spec, w, x, &mut ws);
        for (s, a) in sums.iter_mut().zip(&ws.acts) {
            for (si, ai) in s.iter_mut().zip(a) {
                *si += ai.abs();
            }
        }
    }
    let n = calib.len() as f64;
    for s in &mut sums {
        s.iter_mut().for_each(|v| *v /= n);
    }
    Ok(sums)
}

/// Class predicted for every sample.
pub fn predict(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<Vec<u32>> {
    check_inputs(spec, w, calib)?;
    let mut ws = Workspace::new(spec);
    Ok((0..calib.len())
        .map(|i| {
            forward(spec, w, calib.sample(i).0, &mut ws);
            let logits = &ws.pre[spec.num_layers() - 1];
            let mut best = 0;
            for (k, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

pub fn error_rate(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<f64> {
    let pred = predict(spec, w, calib)?;
    let wrong = pred.iter().zip(calib.labels()).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / calib.len() as f64)
}
