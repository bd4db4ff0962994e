mod common;

use proptest::prelude::*;
use requant_core::autodiff::{self, GradientVector};
use requant_core::sensitivity::{self, first_order_term, second_order_term, FisherSign, MetricKind, SensitivityVector};
use requant_core::{zoo, ComputationSpec, Layout, Nonlinearity, WeightVector};

fn one_param(x: f64) -> WeightVector {
    WeightVector::new(Layout::from_shapes([("fc1", 1, 1, false)]), vec![x]).unwrap()
}

#[test]
fn first_order_term_by_hand() {
    let t = first_order_term(&GradientVector(vec![2.0]), &one_param(1.0), &one_param(0.0)).unwrap();
    assert_eq!(t, -2.0);
}

#[test]
fn second_order_sign_conventions() {
    let h = SensitivityVector::new(vec![4.0], MetricKind::FisherDiag).unwrap();
    let w = one_param(1.0);
    let wt = one_param(0.5);
    assert_eq!(second_order_term(&h, FisherSign::Negative, &w, &wt).unwrap(), -0.5);
    assert_eq!(second_order_term(&h, FisherSign::Positive, &w, &wt).unwrap(), 0.5);
}

#[test]
fn fisher_of_one_sample_is_the_squared_gradient() {
    for (i, spec) in common::architectures().iter().enumerate() {
        let w = common::random_weights(spec, i as u64);
        let calib = common::random_calib(spec, i as u64, 1);
        let g = autodiff::grad(spec, &w, &calib).unwrap();
        let f = sensitivity::metric_fisher_diag(spec, &w, &calib).unwrap();
        for (a, b) in f.values.iter().zip(&g.0) {
            assert!((a - b * b).abs() <= 1e-15 * a.max(1e-300));
        }
    }
}

#[test]
fn fisher_matches_finite_differences_per_sample() {
    for (i, spec) in common::architectures().iter().enumerate() {
        let w = common::random_weights(spec, 40 + i as u64);
        let calib = common::random_calib(spec, i as u64, 5);
        let mut oracle = vec![0.0; w.len()];
        for s in 0..calib.len() {
            let one = calib.slice(s, s + 1).unwrap();
            let fd = common::finite_difference(&w, 1e-5, |p| common::oracle_sample_losses(spec, p, &one).0[0]);
            for (o, d) in oracle.iter_mut().zip(&fd) {
                *o += d * d / calib.len() as f64;
            }
        }
        let f = sensitivity::metric_fisher_diag(spec, &w, &calib).unwrap();
        for (a, b) in f.values.iter().zip(&oracle) {
            assert!(common::rel(*a, *b, 1e-6) < 1e-4, "arch {i}: {a} vs {b}");
        }
    }
}

#[test]
fn gradient_and_activation_metrics_against_oracles() {
    for (i, spec) in common::architectures().iter().enumerate() {
        let w = common::random_weights(spec, i as u64);
        let calib = common::random_calib(spec, i as u64, 7);
        let fd = common::finite_difference(&w, 1e-5, |p| {
            let l = common::oracle_sample_losses(spec, p, &calib).0;
            l.iter().sum::<f64>() / l.len() as f64
        });
        let g = sensitivity::compute_metric(MetricKind::Gradient, spec, &w, &calib).unwrap();
        for (a, b) in g.values.iter().zip(&fd) {
            assert!(common::rel(*a, b.abs(), 1e-6) < 1e-4);
        }
        let (_, act) = common::oracle_sample_losses(spec, &w, &calib);
        let a = sensitivity::compute_metric(MetricKind::Activation, spec, &w, &calib).unwrap();
        for (l, seg) in w.layout().segments().iter().enumerate() {
            for j in 0..seg.len() {
                let (_, c) = seg.local_coord(j);
                let want = if seg.is_bias(j) { 1.0 } else { act[l][c] };
                assert!((a.values[seg.offset + j] - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }
    let spec = ComputationSpec::new(2, vec![2], 2, Nonlinearity::Relu).unwrap();
    let w = zoo::init_weights(&spec, 0);
    let calib = common::random_calib(&spec, 0, 2);
    assert!(sensitivity::compute_metric(MetricKind::Pqi, &spec, &w, &calib).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn taylor_terms_scale_with_lambda(arch in 0usize..16, seed in any::<u64>(), lambda in 0.001f64..1.0) {
        let spec = common::architectures()[arch].clone();
        let w = common::random_weights(&spec, seed);
        let mut wt = w.clone();
        wt.round_to_f32();
        wt.values.iter_mut().enumerate().for_each(|(j, x)| *x += if j % 3 == 0 { 0.05 } else { -0.02 });
        let calib = common::random_calib(&spec, seed, 5);
        let wl = zoo::interpolate(&w, &wt, lambda).unwrap();
        let t1 = sensitivity::taylor_first(&spec, &w, &wt, &calib).unwrap();
        let t1l = sensitivity::taylor_first(&spec, &w, &wl, &calib).unwrap();
        prop_assert!((t1l - lambda * t1).abs() <= 1e-9 * t1.abs().max(1e-12));
        for sign in [FisherSign::Negative, FisherSign::Positive] {
            let t2 = sensitivity::taylor_second(&spec, &w, &wt, &calib, sign).unwrap();
            let t2l = sensitivity::taylor_second(&spec, &w, &wl, &calib, sign).unwrap();
            prop_assert!((t2l - lambda * lambda * t2).abs() <= 1e-9 * t2.abs().max(1e-12));
            if sign == FisherSign::Negative {
                prop_assert!(t2 <= 0.0);
            } else {
                prop_assert!(t2 >= 0.0);
            }
        }
    }

    #[test]
    fn ranking_ignores_positive_rescaling(values in prop::collection::vec(0.0f64..10.0, 1..60), c in 0.01f64..100.0, k in 0usize..70) {
        let a = SensitivityVector::new(values.clone(), MetricKind::Gradient).unwrap();
        let b = SensitivityVector::new(values.iter().map(|v| v * c).collect(), MetricKind::Gradient).unwrap();
        let ka = a.top_k(k);
        prop_assert_eq!(&ka, &b.top_k(k));
        prop_assert_eq!(ka.len(), k.min(values.len()));
        for p in ka.windows(2) {
            prop_assert!(values[p[0]] >= values[p[1]]);
        }
    }
}

#[test]
fn negative_or_nan_sensitivities_are_rejected() {
    assert!(SensitivityVector::new(vec![1.0, -0.1], MetricKind::Pqi).is_err());
    assert!(SensitivityVector::new(vec![f64::NAN], MetricKind::Pqi).is_err());
}

#[test]
fn lambda_outside_unit_interval_rejected() {
    let spec = ComputationSpec::new(2, vec![2], 2, Nonlinearity::Tanh).unwrap();
    let w = zoo::init_weights(&spec, 0);
    let calib = common::random_calib(&spec, 0, 2);
    for bad in [0.0, 1.5, -0.1] {
        assert!(sensitivity::lambda_study(&spec, &w, &w, &calib, None, &[bad], FisherSign::Negative).is_err());
    }
}
