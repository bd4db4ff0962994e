#![allow(dead_code)]

use rand::Rng;
use requant_core::rng;
use requant_core::zoo::{self, Generator};
use requant_core::{CalibSet, ComputationSpec, Nonlinearity, WeightVector};

/// Architectures exercised by the gradient and forward-pass checks.
pub fn architectures() -> Vec<ComputationSpec> {
    let mut out = Vec::new();
    for nl in [Nonlinearity::Relu, Nonlinearity::Tanh] {
        for (d_in, hidden, classes) in [
            (3, vec![4], 2),
            (5, vec![6, 4], 3),
            (4, vec![3, 5, 3], 4),
            (1, vec![1], 1),
        ] {
            for bias in [true, false] {
                let mut spec = ComputationSpec::new(d_in, hidden.clone(), classes, nl).unwrap();
                spec.bias = bias;
                out.push(spec);
            }
        }
    }
    out
}

/// Random weights with nonzero biases.
pub fn random_weights(spec: &ComputationSpec, seed: u64) -> WeightVector {
    let mut w = zoo::init_weights(spec, seed);
    let mut r = rng::stream(seed, "test-bias");
    let layout = w.layout().clone();
    for (l, seg) in layout.segments().iter().enumerate() {
        let n = seg.weight_len();
        for b in &mut w.layer_mut(l)[n..] {
            *b = r.random_range(-0.5..0.5);
        }
    }
    w
}

pub fn random_calib(spec: &ComputationSpec, seed: u64, n: usize) -> CalibSet {
    zoo::generate_calib(
        seed,
        n,
        spec.d_in,
        spec.classes,
        Generator {
            kind: zoo::GeneratorKind::RandomClusters,
            ..Generator::default()
        },
    )
    .unwrap()
}

/// Straight-line forward pass written independently of the library: plain
/// nested loops and a direct log-sum-exp.
pub fn oracle_sample_losses(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> (Vec<f64>, Vec<Vec<f64>>) {
    let widths = spec.widths();
    let layers = widths.len() - 1;
    let mut losses = Vec::new();
    let mut act_sums: Vec<Vec<f64>> = widths[..layers].iter().map(|&d| vec![0.0; d]).collect();
    for i in 0..calib.len() {
        let (x, y) = calib.sample(i);
        let mut a = x.to_vec();
        for l in 0..layers {
            for (s, v) in act_sums[l].iter_mut().zip(&a) {
                *s += v.abs();
            }
            let (rows, cols) = (widths[l + 1], widths[l]);
            let seg = w.layer(l);
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = if spec.bias { seg[rows * cols + r] } else { 0.0 };
                for c in 0..cols {
                    acc += seg[r * cols + c] * a[c];
                }
                z[r] = acc;
            }
            a = if l + 1 < layers {
                z.iter()
                    .map(|&v| match spec.nonlinearity {
                        Nonlinearity::Relu => v.max(0.0),
                        Nonlinearity::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                z
            };
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        losses.push(lse - a[y as usize]);
    }
    let n = calib.len() as f64;
    for s in &mut act_sums {
        s.iter_mut().for_each(|v| *v /= n);
    }
    (losses, act_sums)
}

/// Central finite difference of `f` at every coordinate.
pub fn finite_difference(w: &WeightVector, h: f64, mut f: impl FnMut(&WeightVector) -> f64) -> Vec<f64> {
    let mut probe = w.clone();
    (0..w.len())
        .map(|j| {
            let x = w.values[j];
            probe.values[j] = x + h;
            let up = f(&probe);
            probe.values[j] = x - h;
            let down = f(&probe);
            probe.values[j] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
