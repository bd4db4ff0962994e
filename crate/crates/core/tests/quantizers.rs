mod common;

use proptest::prelude::*;
use rand::Rng;
use requant_core::quant::{
    self, dequantize_uniform, groups_per_row, overlay_bits_per_weight, quantize_kmeans, quantize_uniform,
    weighted_objective, IntRange, QuantConfig, QuantMode, SparseTriplets, Triplet,
};
use requant_core::{rng, Coord, MetricKind, SensitivityVector};

fn ranges() -> impl Strategy<Value = IntRange> {
    prop_oneof![Just(IntRange::FullScale), Just(IntRange::SymmetricStandard)]
}

#[test]
fn uniform_error_is_at_most_half_a_step_on_ten_thousand_groups() {
    let mut r = rng::stream(1, "uniform-groups");
    for trial in 0..10_000 {
        let g = r.random_range(1..=64);
        let bits = r.random_range(2..=8u8);
        let range = if trial % 2 == 0 {
            IntRange::FullScale
        } else {
            IntRange::SymmetricStandard
        };
        let scale = 10f64.powi(r.random_range(-4..=2));
        let w: Vec<f64> = (0..g).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        let q = quantize_uniform(&w, 1, g, bits, range, g, &vec![false; g]);
        let d = dequantize_uniform(&q, 1, g, g);
        let s = f64::from(q.scales[0]);
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in w.iter().zip(&d) {
            assert!(
                (a - b).abs() <= s / 2.0 + 4.0 * f64::from(f32::EPSILON) * peak,
                "trial {trial}: |{a} - {b}| exceeds half of step {s}"
            );
        }
        assert!(q.codes.iter().all(|c| c.abs() <= range.max_code(bits)));
    }
}

#[test]
fn full_scale_worked_example() {
    let q = quantize_uniform(&[0.3, -0.6], 1, 2, 2, IntRange::FullScale, 2, &[false, false]);
    assert_eq!(q.codes, vec![2, -3]);
    let d = dequantize_uniform(&q, 1, 2, 2);
    assert!((d[0] - 0.4).abs() < 1e-7 && (d[1] + 0.6).abs() < 1e-7);
    assert!((f64::from(q.scales[0]) - 0.2).abs() < 1e-8);
}

proptest! {
    #[test]
    fn uniform_quantization_is_idempotent(
        rows in 1usize..5,
        cols in 1usize..40,
        g in 1usize..20,
        bits in 2u8..=8,
        range in ranges(),
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, "idempotence");
        let w: Vec<f64> = (0..rows * cols).map(|_| f64::from(r.random_range(-2.0f32..2.0))).collect();
        let ex = vec![false; w.len()];
        let q1 = quantize_uniform(&w, rows, cols, bits, range, g, &ex);
        let d1 = dequantize_uniform(&q1, rows, cols, g);
        let q2 = quantize_uniform(&d1, rows, cols, bits, range, g, &ex);
        let d2 = dequantize_uniform(&q2, rows, cols, g);
        prop_assert_eq!(&q1.codes, &q2.codes);
        for (a, b) in d1.iter().zip(&d2) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
        }
        prop_assert_eq!(q1.scales.len(), rows * groups_per_row(cols, g));
    }

    #[test]
    fn values_on_the_grid_are_exact(codes in prop::collection::vec(-3i32..=3, 1..16), step in 1u32..1000) {
        let s = f64::from(step) / 1024.0;
        let mut w: Vec<f64> = codes.iter().map(|&c| f64::from(c) * s).collect();
        w[0] = 3.0 * s;
        let n = w.len();
        let q = quantize_uniform(&w, 1, n, 3, IntRange::SymmetricStandard, n, &vec![false; n]);
        prop_assert_eq!(dequantize_uniform(&q, 1, n, n), w);
    }
}

#[test]
fn kmeans_objective_never_increases() {
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, "kmeans-data");
        let n = r.random_range(5..300);
        let w: Vec<f64> = (0..n)
            .map(|_| r.random_range(-1.0..1.0) * r.random_range(0.1..3.0))
            .collect();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if r.random_bool(0.1) {
                    0.0
                } else {
                    r.random_range(0.0..5.0)
                }
            })
            .collect();
        let ex: Vec<bool> = (0..n).map(|_| r.random_bool(0.05)).collect();
        let k = 1 << r.random_range(1..=4);
        let fit = quantize_kmeans(&w, &v, &ex, k, seed, 100);
        for pair in fit.objective_trace.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-300,
                "seed {seed}: {:?}",
                fit.objective_trace
            );
        }
        let direct = weighted_objective(&w, &v, &ex, &fit.codebook, &fit.assignments);
        assert!(
            (direct - fit.objective()).abs() <= 1e-9 * direct.max(1e-12),
            "seed {seed}"
        );
        assert!(fit.codebook.windows(2).all(|p| p[0] <= p[1]));
    }
}

#[test]
fn single_centroid_is_the_weighted_mean() {
    let fit = quantize_kmeans(&[0.0, 1.0], &[3.0, 1.0], &[false, false], 1, 0, 10);
    assert!((fit.codebook[0] - 0.25).abs() <= 1e-12);
    let mut r = rng::stream(5, "weighted-mean");
    for _ in 0..20 {
        let n = r.random_range(1..50);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.01..2.0)).collect();
        let mean = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / v.iter().sum::<f64>();
        let fit = quantize_kmeans(&w, &v, &vec![false; n], 1, 1, 10);
        assert!((fit.codebook[0] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }
}

#[test]
fn two_partition_oracle() {
    // Exhaustive search over every split point of the sorted values.
    let w = [0.0, 0.0, 1.0, 1.0, 1.0];
    let fit = quantize_kmeans(&w, &[1.0; 5], &[false; 5], 2, 9, 20);
    let mut best = f64::INFINITY;
    for split in 1..w.len() {
        let (a, b) = w.split_at(split);
        let m = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let cost: f64 =
            a.iter().map(|x| (x - m(a)).powi(2)).sum::<f64>() + b.iter().map(|x| (x - m(b)).powi(2)).sum::<f64>();
        best = best.min(cost);
    }
    assert_eq!(fit.objective(), best);
    assert_eq!(fit.codebook, vec![0.0, 1.0]);
}

fn random_model(seed: u64) -> quant::QuantizedModel {
    let mut r = rng::stream(seed, "random-artifact");
    let spec = {
        let archs = common::architectures();
        archs[r.random_range(0..archs.len())].clone()
    };
    let w = common::random_weights(&spec, seed);
    let mode = if r.random_bool(0.5) {
        QuantMode::UniformGroup {
            group_size: r.random_range(1..8),
        }
    } else {
        QuantMode::KMeansCodebook { iters: 20 }
    };
    let cfg = QuantConfig {
        bits: r.random_range(2..=5),
        mode,
        range: if r.random_bool(0.5) {
            IntRange::FullScale
        } else {
            IntRange::SymmetricStandard
        },
        seed,
        ..QuantConfig::default()
    };
    let v = SensitivityVector::new(
        (0..w.len()).map(|_| r.random_range(0.0..1.0)).collect(),
        MetricKind::FisherDiag,
    )
    .unwrap();
    let layout = w.layout().clone();
    let mut chosen: Vec<usize> = (0..w.len()).filter(|_| r.random_bool(0.1)).collect();
    chosen.sort_unstable();
    let mut exclude = vec![false; w.len()];
    let mut outliers = Vec::new();
    let mut significant = Vec::new();
    for (i, &j) in chosen.iter().enumerate() {
        let t = Triplet {
            coord: layout.coord_of(j).unwrap(),
            value: r.random_range(-4.0f32..4.0),
        };
        if i % 2 == 0 {
            exclude[j] = true;
            outliers.push(t);
        } else {
            significant.push(t);
        }
    }
    outliers.sort_by_key(|t| t.coord);
    significant.sort_by_key(|t| t.coord);
    quant::quantize_model(&w, &cfg, &v, &exclude)
        .unwrap()
        .with_overlays(
            SparseTriplets::new(outliers).unwrap(),
            SparseTriplets::new(significant).unwrap(),
        )
        .unwrap()
}

#[test]
fn sparse_matvec_matches_dense_reconstruction_on_random_artifacts() {
    for seed in 0..100u64 {
        let qm = random_model(seed);
        let w = quant::reconstruct(&qm).unwrap();
        let mut r = rng::stream(seed, "matvec-input");
        for (l, layer) in qm.layers.iter().enumerate() {
            let x: Vec<f64> = (0..layer.cols).map(|_| r.random_range(-2.0..2.0)).collect();
            let y = quant::sparse_matvec(layer, &qm.layer_overlays(l), &x).unwrap();
            let yd = quant::dense_matvec(w.layer_parts(l).0, layer.rows, layer.cols, &x);
            for (a, b) in y.iter().zip(&yd) {
                assert!(
                    (a - b).abs() <= 1e-6 * b.abs().max(1e-9),
                    "seed {seed} layer {l}: {a} vs {b}"
                );
            }
            let zero = quant::sparse_matvec(layer, &qm.layer_overlays(l), &vec![0.0; layer.cols]).unwrap();
            assert!(zero.iter().all(|&z| z == 0.0));
        }
    }
}

#[test]
fn overlay_values_are_reconstructed_exactly() {
    for seed in 0..20u64 {
        let qm = random_model(seed);
        let w = quant::reconstruct(&qm).unwrap();
        for t in qm.outliers.iter().chain(qm.significant.iter()) {
            assert_eq!(w.get(t.coord), Some(f64::from(t.value)));
        }
    }
}

#[test]
fn sparse_matvec_rejects_bad_inputs() {
    let qm = random_model(3);
    let layer = &qm.layers[0];
    assert!(quant::sparse_matvec(layer, &[], &vec![0.0; layer.cols + 1]).is_err());
    let bad = [Triplet {
        coord: Coord::new(0, layer.rows, 0),
        value: 1.0,
    }];
    assert!(matches!(
        quant::sparse_matvec(layer, &[&bad[..]], &vec![1.0; layer.cols]),
        Err(requant_core::Error::Format(_))
    ));
}

#[test]
fn half_percent_sparsity_costs_a_quarter_bit() {
    assert_eq!(overlay_bits_per_weight(50, 10_000), 0.24);
    assert_eq!(48.0 * 0.005, 0.24);
}

#[test]
fn empty_overlays_cost_only_codes_and_steps() {
    let qm = random_model(8)
        .with_overlays(SparseTriplets::empty(), SparseTriplets::empty())
        .unwrap();
    let s = qm.storage();
    assert_eq!(s.overlay_bits_per_weight(), 0.0);
    assert_eq!(
        s.bits_per_weight(),
        (s.code_bits + s.side_bits) as f64 / s.params as f64
    );
}
