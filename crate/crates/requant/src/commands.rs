//! Subcommand implementations. Each writes its files under the configured
//! output directory and returns the invariant checks it ran.

use std::path::{Path, PathBuf};

use requant_core::pqi::{self, Granularity};
use requant_core::quant::{self, dense_matvec, sparse_matvec, QuantizedModel};
use requant_core::requant::{budget_of, run_pipeline, PipelineConfig, PipelineOutput, Selection};
use requant_core::sensitivity::{self, TaylorReport};
use requant_core::stats::relative_error;
use requant_core::zoo::build_rig;
use requant_core::{autodiff, CalibSet, ComputationSpec, FisherSign, WeightVector};

use crate::artifact::{encode_artifact, load_artifact, save_artifact, Artifact};
use crate::checkpoint::{load_calib, load_checkpoint, save_calib, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::report::Table;
use crate::row;

/// Relative tolerance of the dense-and-sparse matvec check.
pub const MATVEC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl Outcome {
    fn check(&mut self, name: &str, passed: bool) {
        self.checks.push(Check {
            name: name.into(),
            passed,
        });
    }

    fn table(&mut self, dir: &Path, hash: &str, t: &Table) -> Result<()> {
        t.write(dir, hash)?;
        self.files.push(dir.join(format!("{}.tsv", t.name)));
        Ok(())
    }

    fn finish(mut self, dir: &Path, hash: &str, command: &str) -> Result<Self> {
        let mut t = Table::new(&format!("{command}_checks"), &["check", "passed"]);
        for c in &self.checks {
            t.push(row![c.name.as_str(), c.passed]);
        }
        self.table(dir, hash, &t)?;
        Ok(self)
    }

    /// `Err(Error::Checks)` naming the failed checks, if any.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(Error::Checks(failed))
        }
    }
}

/// The model and data a command works on.
pub struct Inputs {
    pub spec: ComputationSpec,
    pub weights: WeightVector,
    pub calib: CalibSet,
    pub heldout: Option<CalibSet>,
}

/// Loads the configured checkpoint and calibration files, or rebuilds the
/// seeded rig when no checkpoint is configured.
pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    match &cfg.input.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let calib_path = cfg
                .input
                .calib
                .as_ref()
                .ok_or_else(|| Error::Config("input.calib is required with input.checkpoint".into()))?;
            Ok(Inputs {
                spec: ck.spec,
                weights: ck.weights,
                calib: load_calib(calib_path)?,
                heldout: cfg.input.heldout.as_deref().map(load_calib).transpose()?,
            })
        }
        None => {
            let rig = build_rig(cfg.seed, &cfg.rig_config()?)?;
            Ok(Inputs {
                spec: rig.spec,
                weights: rig.weights,
                calib: rig.calib,
                heldout: Some(rig.heldout),
            })
        }
    }
}

fn losses(inp: &Inputs, w: &WeightVector) -> Result<(f64, Option<f64>)> {
    let f = autodiff::forward_loss(&inp.spec, w, &inp.calib)?;
    let h = inp
        .heldout
        .as_ref()
        .map(|h| autodiff::forward_loss(&inp.spec, w, h))
        .transpose()?;
    Ok((f, h))
}

/// Deterministic probe vector with entries in `[-1, 1]`.
fn probe(len: usize, k: usize) -> Vec<f64> {
    (0..len)
        .map(|j| ((j * 7919 + k * 104_729) % 17) as f64 / 8.0 - 1.0)
        .collect()
}

/// Largest relative deviation between the dense-and-sparse kernel and a
/// dense matvec of the reconstructed weights, over probe inputs (and the
/// calibration features for the first layer).
pub fn matvec_deviation(qm: &QuantizedModel, calib: Option<&CalibSet>) -> Result<f64> {
    let w = quant::reconstruct(qm)?;
    let mut worst = 0.0f64;
    for (l, layer) in qm.layers.iter().enumerate() {
        let (wm, _) = w.layer_parts(l);
        let mut inputs: Vec<Vec<f64>> = (0..4).map(|k| probe(layer.cols, k)).collect();
        if let Some(c) = calib.filter(|c| l == 0 && c.d_in() == layer.cols) {
            inputs.extend((0..c.len().min(16)).map(|i| c.sample(i).0.to_vec()));
        }
        for x in &inputs {
            let y = sparse_matvec(layer, &qm.layer_overlays(l), x)?;
            let yd = dense_matvec(wm, layer.rows, layer.cols, x);
            let scale = yd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let dev = y.iter().zip(&yd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(dev / scale);
        }
    }
    Ok(worst)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let rig = build_rig(cfg.seed, &cfg.rig_config()?)?;
    let mut out = Outcome::default();
    let ck = Checkpoint {
        spec: rig.spec.clone(),
        weights: rig.weights.clone(),
        grad_norm_inf: Some(rig.trained.grad_norm_inf),
    };
    for (name, set) in [
        ("train", &rig.train_set),
        ("calib", &rig.calib),
        ("heldout", &rig.heldout),
    ] {
        let p = dir.join(format!("{name}.rqcl"));
        save_calib(&p, set)?;
        out.files.push(p);
    }
    let p = dir.join("model.rqmd");
    save_checkpoint(&p, &ck)?;
    out.files.push(p);

    let spec = &rig.spec;
    let mut t = Table::new("train", &["metric", "value"]);
    t.push(row!["params", rig.weights.len()]);
    t.push(row!["train_loss_before", rig.trained.loss_before]);
    t.push(row!["train_loss_after", rig.trained.loss_after]);
    t.push(row!["train_grad_norm_inf", rig.trained.grad_norm_inf]);
    t.push(row![
        "train_error",
        autodiff::error_rate(spec, &rig.weights, &rig.train_set)?
    ]);
    t.push(row![
        "calib_loss",
        autodiff::forward_loss(spec, &rig.weights, &rig.calib)?
    ]);
    t.push(row![
        "heldout_loss",
        autodiff::forward_loss(spec, &rig.weights, &rig.heldout)?
    ]);
    t.push(row![
        "heldout_error",
        autodiff::error_rate(spec, &rig.weights, &rig.heldout)?
    ]);
    out.table(dir, &hash, &t)?;
    out.check(
        "loss-decreased",
        cfg.train.steps == 0 || rig.trained.loss_after <= rig.trained.loss_before,
    );
    out.finish(dir, &hash, "train")
}

const ABLATION_COLUMNS: &[&str] = &[
    "run",
    "selection",
    "r_o",
    "r_s",
    "beta",
    "detach_steps",
    "overlay_nonzeros",
    "calib_loss",
    "heldout_loss",
    "bits_per_weight",
];

fn quantize_plain(inp: &Inputs, cfg: &ExperimentConfig) -> Result<QuantizedModel> {
    let v = sensitivity::compute_metric(cfg.metric(), &inp.spec, &inp.weights, &inp.calib)?;
    Ok(quant::quantize_model(
        &inp.weights,
        &cfg.quant_config(),
        &v,
        &vec![false; inp.weights.len()],
    )?)
}

pub fn cmd_quantize(cfg: &ExperimentConfig) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let inp = load_inputs(cfg)?;
    let qm = quantize_plain(&inp, cfg)?;
    let mut out = Outcome::default();
    let artifact = Artifact {
        spec: inp.spec.clone(),
        model: qm.clone(),
    };
    let p = dir.join("quantized.rqqt");
    save_artifact(&p, &artifact)?;
    out.files.push(p);

    let (f0, h0) = losses(&inp, &inp.weights)?;
    let (f, h) = losses(&inp, &quant::reconstruct(&qm)?)?;
    let mut t = Table::new("quantize", ABLATION_COLUMNS);
    t.push(row![
        "full-precision",
        "none",
        0.0,
        0.0,
        0.0,
        0usize,
        0usize,
        f0,
        h0,
        32.0
    ]);
    t.push(row![
        "quantized",
        "none",
        0.0,
        0.0,
        0.0,
        0usize,
        0usize,
        f,
        h,
        qm.storage().bits_per_weight()
    ]);
    out.table(dir, &hash, &t)?;
    let decoded = crate::artifact::decode_artifact(&encode_artifact(&artifact)?)?;
    out.check("artifact-roundtrip", decoded == artifact);
    out.check(
        "matvec-equivalence",
        matvec_deviation(&qm, Some(&inp.calib))? <= MATVEC_TOLERANCE,
    );
    out.finish(dir, &hash, "quantize")
}

fn taylor_table(name: &str, report: &TaylorReport) -> Table {
    let mut t = Table::new(
        name,
        &[
            "scope",
            "lambda",
            "first_order",
            "second_order",
            "predicted",
            "actual",
            "actual_heldout",
            "actual_over_first",
            "underestimation",
        ],
    );
    for r in &report.rows {
        t.push(row![
            r.scope.as_str(),
            r.lambda,
            r.first_order,
            r.second_order,
            r.first_order + r.second_order,
            r.actual,
            r.actual_heldout,
            r.actual / r.first_order,
            r.underestimation()
        ]);
    }
    t
}

pub fn cmd_taylor_study(cfg: &ExperimentConfig) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let inp = load_inputs(cfg)?;
    let v = sensitivity::compute_metric(cfg.metric(), &inp.spec, &inp.weights, &inp.calib)?;
    let sign = cfg.fisher_sign();
    let layers = sensitivity::layer_study(
        &inp.spec,
        &inp.weights,
        &inp.calib,
        inp.heldout.as_ref(),
        &cfg.quant_config(),
        &v,
        sign,
    )?;
    let w_tilde = quant::reconstruct(&quantize_plain(&inp, cfg)?)?;
    let lambdas = sensitivity::lambda_study(
        &inp.spec,
        &inp.weights,
        &w_tilde,
        &inp.calib,
        inp.heldout.as_ref(),
        &cfg.taylor.lambdas,
        sign,
    )?;
    let mut out = Outcome::default();
    let mut by_layer = taylor_table("taylor_layers", &layers);
    let sum = layers.sum_of_layers();
    let all = layers.row("All").map_or(f64::NAN, |r| r.actual);
    by_layer.push(row![
        "sum(layers)",
        None::<f64>,
        None::<f64>,
        None::<f64>,
        None::<f64>,
        sum,
        None::<f64>,
        None::<f64>,
        None::<f64>
    ]);
    out.table(dir, &hash, &by_layer)?;
    out.table(dir, &hash, &taylor_table("taylor_lambda", &lambdas))?;

    out.check(
        "second-order-sign",
        layers.rows.iter().chain(&lambdas.rows).all(|r| match sign {
            FisherSign::Negative => r.second_order <= 0.0,
            FisherSign::Positive => r.second_order >= 0.0,
        }),
    );
    out.check("layers-non-additive", relative_error(sum, all, 1e-300) > 1e-9);
    if let Some(base) = lambdas.rows.iter().find(|r| r.lambda == Some(1.0)) {
        out.check(
            "first-order-linear-in-lambda",
            lambdas
                .rows
                .iter()
                .all(|r| relative_error(r.first_order, r.lambda.unwrap() * base.first_order, 1e-300) <= 1e-9),
        );
        out.check(
            "second-order-quadratic-in-lambda",
            lambdas.rows.iter().all(|r| {
                let l = r.lambda.unwrap();
                relative_error(r.second_order, l * l * base.second_order, 1e-300) <= 1e-9
            }),
        );
    }
    out.finish(dir, &hash, "taylor-study")
}

pub fn cmd_pqi(cfg: &ExperimentConfig) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let inp = load_inputs(cfg)?;
    let w_tilde = quant::reconstruct(&quantize_plain(&inp, cfg)?)?;
    let (f0, _) = losses(&inp, &inp.weights)?;
    let (f1, _) = losses(&inp, &w_tilde)?;
    let actual = f1 - f0;
    let rule = cfg.rule();
    let mut out = Outcome::default();

    let mut intervals = Table::new(
        "pqi_intervals",
        &[
            "intervals",
            "signed_delta_f",
            "delta_f_pqi",
            "actual",
            "signed_abs_error",
            "signed_rel_error",
        ],
    );
    let mut triangle = true;
    let mut sweep = cfg.pqi.interval_sweep.clone();
    if !sweep.contains(&cfg.pqi.intervals) {
        sweep.push(cfg.pqi.intervals);
    }
    let mut main = None;
    for &n in &sweep {
        let r = pqi::pqi_integral(&inp.spec, &inp.weights, &w_tilde, &inp.calib, n, rule)?;
        triangle &= r.delta_f_pqi + 1e-12 >= r.signed_delta_f.abs();
        intervals.push(row![
            n,
            r.signed_delta_f,
            r.delta_f_pqi,
            actual,
            (r.signed_delta_f - actual).abs(),
            relative_error(r.signed_delta_f, actual, 1e-300)
        ]);
        if n == cfg.pqi.intervals {
            main = Some(r);
        }
    }
    out.table(dir, &hash, &intervals)?;
    let result = main.expect("main interval count is in the sweep");

    let mut layers = Table::new("pqi_layers", &["partition", "count", "sum", "mean"]);
    for g in [Granularity::Layer, Granularity::Sublayer, Granularity::All] {
        for a in pqi::aggregate(&result, g) {
            layers.push(row![a.label, a.count, a.sum, a.mean]);
        }
    }
    out.table(dir, &hash, &layers)?;

    let mut coverage = Table::new("pqi_coverage", &["top_percent", "share_of_delta_f_pqi"]);
    let curve = pqi::coverage_curve(&result, &cfg.pqi.coverage);
    for &(p, s) in &curve {
        coverage.push(row![p, s]);
    }
    out.table(dir, &hash, &coverage)?;

    let layer_total: f64 = result.layer_sums.iter().sum();
    out.check("triangle-bound", triangle);
    out.check(
        "layer-additivity",
        relative_error(layer_total, result.delta_f_pqi, 1e-300) <= 1e-12 || result.delta_f_pqi == 0.0,
    );
    out.check(
        "bound-recomputable",
        relative_error(result.recomputed_bound(), result.delta_f_pqi, 1e-300) <= 1e-12 || result.delta_f_pqi == 0.0,
    );
    out.check(
        "coverage-monotone",
        curve.windows(2).all(|w| w[0].0 > w[1].0 || w[0].1 <= w[1].1),
    );
    out.finish(dir, &hash, "pqi")
}

/// Invariants of a finished pipeline run.
pub fn pipeline_checks(w: &WeightVector, cfg: &PipelineConfig, run: &PipelineOutput) -> Result<Vec<Check>> {
    let qm = &run.model;
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool| {
        checks.push(Check {
            name: name.into(),
            passed,
        })
    };
    let steps = cfg.detach_steps()?;
    let dropped = run.plan.as_ref().map_or(0, |p| p.dropped);
    let expected = budget_of(w.len(), cfg.r_o) - dropped + steps * budget_of(w.len(), cfg.beta);
    check(
        "budget-conservation",
        qm.outliers.len() + qm.significant.len() == expected,
    );
    check("overlays-disjoint", qm.outliers.is_disjoint(&qm.significant));
    check(
        "exact-restoration",
        qm.significant
            .iter()
            .chain(qm.outliers.iter())
            .all(|t| w.get(t.coord).map(|v| v as f32) == Some(t.value)),
    );
    let rec = quant::reconstruct(qm)?;
    check(
        "overlay-values-reconstructed",
        qm.significant
            .iter()
            .all(|t| rec.get(t.coord) == Some(f64::from(t.value))),
    );
    check(
        "triangle-bound",
        run.pre_pqi.delta_f_pqi + 1e-12 >= run.pre_pqi.signed_delta_f.abs(),
    );
    if let Some(plan) = &run.plan {
        check(
            "grid-search-dominance",
            plan.trace.iter().all(|tr| plan.loss <= tr.loss),
        );
    }
    check(
        "detached-sets-disjoint",
        run.detach.detached() == 0 || {
            let mut all: Vec<_> = run.detach.steps.iter().flat_map(|s| s.coords.iter().copied()).collect();
            let n = all.len();
            all.sort();
            all.dedup();
            all.len() == n
        },
    );
    Ok(checks)
}

pub fn cmd_requant(cfg: &ExperimentConfig) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let inp = load_inputs(cfg)?;
    let pcfg = cfg.pipeline_config()?;
    let run = run_pipeline(&inp.spec, &inp.weights, &inp.calib, inp.heldout.as_ref(), &pcfg)?;
    let mut out = Outcome::default();
    let p = dir.join("requant.rqqt");
    save_artifact(
        &p,
        &Artifact {
            spec: inp.spec.clone(),
            model: run.model.clone(),
        },
    )?;
    out.files.push(p);

    let mut steps = Table::new(
        "requant_steps",
        &["step", "description", "calib_loss", "heldout_loss", "bits_per_weight"],
    );
    for s in &run.steps {
        steps.push(row![
            s.step.index(),
            s.step.description(),
            s.calib_loss,
            s.heldout_loss,
            s.bits_per_weight
        ]);
    }
    out.table(dir, &hash, &steps)?;

    if let Some(plan) = &run.plan {
        let layout = inp.weights.layout();
        let mut cols = vec!["t".to_string(), "calib_loss".to_string(), "chosen".to_string()];
        cols.extend(layout.segments().iter().map(|s| format!("outliers_{}", s.name)));
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = Table::new("outlier_search", &col_refs);
        for tr in &plan.trace {
            let mut r = row![tr.t, tr.loss, tr.t == plan.t];
            r.extend(tr.counts.iter().map(|c| c.to_string()));
            t.push(r);
        }
        out.table(dir, &hash, &t)?;
    }

    let mut d = Table::new(
        "detach",
        &[
            "pass",
            "detached",
            "delta_f_pqi_before",
            "delta_f_pqi_after",
            "calib_loss_after",
        ],
    );
    for s in &run.detach.steps {
        d.push(row![
            s.step,
            s.coords.len(),
            s.dfpqi_before,
            s.dfpqi_after,
            s.loss_after
        ]);
    }
    out.table(dir, &hash, &d)?;

    let mut grid = Table::new("ablation", ABLATION_COLUMNS);
    let mut add = |label: &str, c: &PipelineConfig, r: &PipelineOutput| -> Result<()> {
        let last = r.steps.last().expect("six steps");
        grid.push(row![
            label,
            match c.selection {
                Selection::Pqi => "pqi",
                Selection::Random => "random",
            },
            c.r_o,
            c.r_s,
            c.beta,
            c.detach_steps()?,
            r.model.outliers.len() + r.model.significant.len(),
            last.calib_loss,
            last.heldout_loss,
            last.bits_per_weight
        ]);
        Ok(())
    };
    let variants = [
        (
            "dense-only",
            PipelineConfig {
                r_o: 0.0,
                r_s: 0.0,
                ..pcfg
            },
        ),
        ("outliers-only", PipelineConfig { r_s: 0.0, ..pcfg }),
    ];
    for (label, c) in &variants {
        let r = run_pipeline(&inp.spec, &inp.weights, &inp.calib, inp.heldout.as_ref(), c)?;
        add(label, c, &r)?;
    }
    add("requant", &pcfg, &run)?;
    let random = PipelineConfig {
        selection: Selection::Random,
        ..pcfg
    };
    let r = run_pipeline(&inp.spec, &inp.weights, &inp.calib, inp.heldout.as_ref(), &random)?;
    add("random", &random, &r)?;
    for &beta in &cfg.requant.beta_sweep {
        let c = PipelineConfig { beta, ..pcfg };
        if beta == pcfg.beta || c.detach_steps().is_err() {
            continue;
        }
        let r = run_pipeline(&inp.spec, &inp.weights, &inp.calib, inp.heldout.as_ref(), &c)?;
        add(&format!("beta={beta}"), &c, &r)?;
    }
    out.table(dir, &hash, &grid)?;

    for c in pipeline_checks(&inp.weights, &pcfg, &run)? {
        out.checks.push(c);
    }
    out.check(
        "matvec-equivalence",
        matvec_deviation(&run.model, Some(&inp.calib))? <= MATVEC_TOLERANCE,
    );
    out.finish(dir, &hash, "requant")
}

pub fn cmd_eval(cfg: &ExperimentConfig, artifact: &Path, calib: &Path) -> Result<Outcome> {
    let hash = cfg.hash();
    let dir = &cfg.out_dir;
    let a = load_artifact(artifact)?;
    let calib = load_calib(calib)?;
    let w = quant::reconstruct(&a.model)?;
    let storage = a.model.storage();
    let dev = matvec_deviation(&a.model, Some(&calib))?;
    let mut out = Outcome::default();
    let mut t = Table::new("eval", &["metric", "value"]);
    t.push(row!["params", storage.params]);
    t.push(row!["calib_loss", autodiff::forward_loss(&a.spec, &w, &calib)?]);
    t.push(row!["calib_error", autodiff::error_rate(&a.spec, &w, &calib)?]);
    t.push(row!["bits_per_weight", storage.bits_per_weight()]);
    t.push(row!["dense_bits_per_weight", storage.dense_bits_per_weight()]);
    t.push(row!["overlay_bits_per_weight", storage.overlay_bits_per_weight()]);
    t.push(row!["overlay_nonzeros", storage.overlay_nonzeros]);
    t.push(row!["matvec_max_rel_deviation", dev]);
    out.table(dir, &hash, &t)?;
    out.check("matvec-equivalence", dev <= MATVEC_TOLERANCE);
    out.finish(dir, &hash, "eval")
}
