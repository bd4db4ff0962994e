mod common;

use proptest::prelude::*;
use requant_core::requant::{
    self, allocate_budget, budget_of, run_pipeline, select_outliers, significant_weight_search, PipelineConfig,
    PipelineStep, Ranking, Selection,
};
use requant_core::{autodiff, pqi, quant, sensitivity, ComputationSpec, Coord, Error, Nonlinearity, QuadratureRule};

fn rig() -> (ComputationSpec, requant_core::WeightVector, requant_core::CalibSet) {
    let spec = ComputationSpec::new(8, vec![16], 4, Nonlinearity::Relu).unwrap();
    let w = common::random_weights(&spec, 11);
    let calib = common::random_calib(&spec, 3, 24);
    (spec, w, calib)
}

fn small_cfg() -> PipelineConfig {
    PipelineConfig {
        r_o: 2.0,
        r_s: 3.0,
        beta: 1.0,
        intervals: 8,
        ..PipelineConfig::default()
    }
}

proptest! {
    #[test]
    fn allocation_conserves_and_respects_capacity(
        layers in prop::collection::vec((0.0f64..10.0, 0usize..50), 1..6),
        budget in 0usize..200,
        t in 0.0f64..1.5,
    ) {
        let dfpqi: Vec<f64> = layers.iter().map(|l| l.0).collect();
        let cap: Vec<usize> = layers.iter().map(|l| l.1).collect();
        let a = allocate_budget(&dfpqi, &cap, budget, t).unwrap();
        let placed: usize = a.counts.iter().sum();
        prop_assert_eq!(placed + a.dropped, budget);
        prop_assert!(a.counts.iter().zip(&cap).all(|(c, k)| c <= k));
        prop_assert_eq!(a.dropped, budget.saturating_sub(cap.iter().sum()));
    }

    #[test]
    fn allocation_follows_sensitivity_order(
        dfpqi in prop::collection::vec(0.01f64..10.0, 2..6),
        budget in 0usize..500,
        t in 0.05f64..1.0,
    ) {
        let cap = vec![usize::MAX / 8; dfpqi.len()];
        let a = allocate_budget(&dfpqi, &cap, budget, t).unwrap();
        for i in 0..dfpqi.len() {
            for j in 0..dfpqi.len() {
                if dfpqi[i].powf(t) > dfpqi[j].powf(t) {
                    prop_assert!(a.counts[i] >= a.counts[j], "{:?} -> {:?}", dfpqi, a.counts);
                }
            }
        }
    }
}

#[test]
fn zero_temperature_splits_evenly() {
    let a = allocate_budget(&[9.0, 1.0, 0.5], &[100, 100, 100], 9, 0.0).unwrap();
    assert_eq!(a.counts, vec![3, 3, 3]);
    let b = allocate_budget(&[9.0, 1.0, 0.5], &[100, 100, 100], 10, 0.0).unwrap();
    assert_eq!(b.counts, vec![4, 3, 3]);
}

#[test]
fn largest_magnitudes_become_outliers() {
    assert_eq!(select_outliers(&[1.0, -5.0, 2.0, 0.0], 2), vec![1, 2]);
    assert_eq!(select_outliers(&[1.0, -1.0, 1.0], 2), vec![0, 1]);
    assert_eq!(budget_of(6792, 0.45), 31);
    assert_eq!(budget_of(6792, 0.025), 2);
}

#[test]
fn single_pass_equals_top_k_of_contributions() {
    let (spec, w, calib) = rig();
    let cfg = PipelineConfig {
        r_s: 2.0,
        beta: 2.0,
        ..small_cfg()
    };
    let v = sensitivity::compute_metric(cfg.metric, &spec, &w, &calib).unwrap();
    let qm = quant::quantize_model(&w, &cfg.quant, &v, &vec![false; w.len()]).unwrap();
    let (sig, trace) = significant_weight_search(&spec, &w, &qm, &calib, &cfg).unwrap();

    let wt = quant::reconstruct(&qm).unwrap();
    let r = pqi::pqi_integral(&spec, &w, &wt, &calib, cfg.intervals, cfg.rule).unwrap();
    let c = r.contributions();
    let mut order: Vec<usize> = (0..w.len()).filter(|&j| !w.layout().is_bias(j)).collect();
    order.sort_by(|&a, &b| c[b].partial_cmp(&c[a]).unwrap().then(a.cmp(&b)));
    let mut want: Vec<Coord> = order[..budget_of(w.len(), 2.0)]
        .iter()
        .map(|&j| w.layout().coord_of(j).unwrap())
        .collect();
    want.sort();
    let got: Vec<Coord> = sig.iter().map(|t| t.coord).collect();
    assert_eq!(got, want);
    assert_eq!(trace.steps.len(), 1);
    assert!((trace.steps[0].dfpqi_before - r.delta_f_pqi).abs() <= 1e-15 * r.delta_f_pqi);
}

#[test]
fn zero_ratios_reproduce_plain_quantization() {
    let (spec, w, calib) = rig();
    let cfg = PipelineConfig {
        r_o: 0.0,
        r_s: 0.0,
        ..small_cfg()
    };
    let out = run_pipeline(&spec, &w, &calib, None, &cfg).unwrap();
    let v = sensitivity::compute_metric(cfg.metric, &spec, &w, &calib).unwrap();
    let plain = quant::quantize_model(&w, &cfg.quant, &v, &vec![false; w.len()]).unwrap();
    assert_eq!(
        quant::reconstruct(&out.model).unwrap(),
        quant::reconstruct(&plain).unwrap()
    );
    assert_eq!(out.model.storage().bits_per_weight(), plain.storage().bits_per_weight());
    assert!(out.model.outliers.is_empty() && out.model.significant.is_empty());
}

#[test]
fn pipeline_budgets_and_restoration() {
    let (spec, w, calib) = rig();
    for ranking in [Ranking::Global, Ranking::PerLayer] {
        for selection in [Selection::Pqi, Selection::Random] {
            let cfg = PipelineConfig {
                ranking,
                selection,
                ..small_cfg()
            };
            let out = run_pipeline(&spec, &w, &calib, Some(&calib), &cfg).unwrap();
            let m = &out.model;
            assert_eq!(m.outliers.len(), budget_of(w.len(), cfg.r_o));
            assert_eq!(m.significant.len(), 3 * budget_of(w.len(), cfg.beta));
            let o: Vec<Coord> = m.outliers.iter().map(|t| t.coord).collect();
            assert!(m.significant.iter().all(|t| !o.contains(&t.coord)));
            let wt = quant::reconstruct(m).unwrap();
            for t in m.outliers.iter().chain(m.significant.iter()) {
                let j = w.layout().flat_index(t.coord).unwrap();
                assert!(!w.layout().is_bias(j));
                assert_eq!(wt.values[j], f64::from(w.values[j] as f32));
            }
            assert_eq!(out.steps.len(), 6);
            for (s, step) in out.steps.iter().zip(PipelineStep::ALL) {
                assert_eq!(s.step, step);
            }
            let final_loss = autodiff::forward_loss(&spec, &wt, &calib).unwrap();
            assert_eq!(out.final_loss(), final_loss);
            assert_eq!(out.steps[5].heldout_loss, Some(final_loss));
            assert_eq!(out.plan.is_some(), selection == Selection::Pqi);
            let again = run_pipeline(&spec, &w, &calib, Some(&calib), &cfg).unwrap();
            assert_eq!(again.model, out.model);
        }
    }
}

#[test]
fn outlier_search_picks_the_lowest_loss() {
    let (spec, w, calib) = rig();
    let cfg = small_cfg();
    let out = run_pipeline(&spec, &w, &calib, None, &cfg).unwrap();
    let plan = out.plan.unwrap();
    assert_eq!(plan.trace.len(), cfg.temperatures().len());
    let best = plan.trace.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min);
    let first = plan.trace.iter().find(|t| t.loss == best).unwrap();
    assert_eq!(plan.t, first.t);
    assert_eq!(plan.loss, best);
    for trial in &plan.trace {
        assert_eq!(trial.counts.iter().sum::<usize>(), budget_of(w.len(), cfg.r_o));
    }
}

#[test]
fn detach_trace_is_chained() {
    let (spec, w, calib) = rig();
    let out = run_pipeline(&spec, &w, &calib, None, &small_cfg()).unwrap();
    let steps = &out.detach.steps;
    assert_eq!(steps.len(), 3);
    for p in steps.windows(2) {
        assert_eq!(p[0].dfpqi_after, p[1].dfpqi_before);
    }
    let wt = quant::reconstruct(&out.model).unwrap();
    let r = pqi::pqi_integral(&spec, &w, &wt, &calib, 8, QuadratureRule::RightEndpoint).unwrap();
    assert!((steps[2].dfpqi_after - r.delta_f_pqi).abs() <= 1e-12 * r.delta_f_pqi);
}

#[test]
fn ratio_that_is_not_a_multiple_of_beta_is_rejected() {
    let (spec, w, calib) = rig();
    let cfg = PipelineConfig {
        r_s: 0.05,
        beta: 0.02,
        ..small_cfg()
    };
    let err = run_pipeline(&spec, &w, &calib, None, &cfg).unwrap_err();
    assert!(matches!(
        err,
        Error::Step {
            step: PipelineStep::PreQuantize,
            ..
        }
    ));
    assert!(matches!(err.root(), Error::Config(_)));
}

#[test]
fn errors_name_the_failing_step() {
    let (spec, w, _) = rig();
    let wrong = common::random_calib(&ComputationSpec::new(5, vec![2], 4, Nonlinearity::Relu).unwrap(), 0, 4);
    let err = run_pipeline(&spec, &w, &wrong, None, &small_cfg()).unwrap_err();
    assert!(matches!(
        err,
        Error::Step {
            step: PipelineStep::PreQuantize,
            ..
        }
    ));

    let (spec, w, calib) = rig();
    let cfg = PipelineConfig {
        r_s: 100.0,
        beta: 50.0,
        ..small_cfg()
    };
    let err = run_pipeline(&spec, &w, &calib, None, &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Step {
                step: PipelineStep::SignificantSearch,
                ..
            }
        ),
        "{err}"
    );
    assert!(matches!(err.root(), Error::Parameter(_)));
}

#[test]
fn default_rig_budget() {
    let spec = ComputationSpec::default_rig();
    let d = spec.layout().total_len();
    assert_eq!(d, 6792);
    let cfg = PipelineConfig::default();
    assert_eq!(requant::budget_of(d, cfg.r_o), 31);
    assert_eq!(cfg.detach_steps().unwrap(), 2);
}
