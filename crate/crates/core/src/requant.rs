//! Dense-and-sparse quantization pipeline.
//!
//! Outliers (large-magnitude weights) are detached before quantization with
//! a per-layer budget apportioned by `ΔF_PQI^t`; the temperature `t` is
//! picked by grid search on the calibration loss. After re-quantization the
//! weights with the largest `v_PQI ⊙ |w̃ - w|` are restored to full
//! precision in `r_s/β` greedy passes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::model::{CalibSet, ComputationSpec, Coord, Layout, WeightVector};
use crate::pqi::{self, PqiResult, QuadratureRule};
use crate::quant::{self, QuantConfig, QuantMeta, QuantizedModel, SparseTriplets, Triplet};
use crate::rng;
use crate::sensitivity::{self, top_k_indices, MetricKind, SensitivityVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineStep {
    PreQuantize,
    PqiAnalysis,
    OutlierSearch,
    Requantize,
    SignificantSearch,
    Finalize,
}

impl PipelineStep {
    pub const ALL: [PipelineStep; 6] = [
        PipelineStep::PreQuantize,
        PipelineStep::PqiAnalysis,
        PipelineStep::OutlierSearch,
        PipelineStep::Requantize,
        PipelineStep::SignificantSearch,
        PipelineStep::Finalize,
    ];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn description(self) -> &'static str {
        match self {
            PipelineStep::PreQuantize => "pre-quantize",
            PipelineStep::PqiAnalysis => "pqi analysis",
            PipelineStep::OutlierSearch => "outlier ratio search",
            PipelineStep::Requantize => "re-quantize without outliers",
            PipelineStep::SignificantSearch => "significant weight search",
            PipelineStep::Finalize => "complete quantization",
        }
    }
}

impl fmt::Display for PipelineStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.index(), self.description())
    }
}

/// `round(D · ratio / 100)`.
pub fn budget_of(params: usize, ratio_percent: f64) -> usize {
    libm::round(params as f64 * ratio_percent / 100.0) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub counts: Vec<usize>,
    /// Budget that could not be placed because every layer was full.
    pub dropped: usize,
}

/// Splits `budget` by largest remainder over `shares` (ties to the lower
/// index). Zero total share splits evenly.
fn largest_remainder(shares: &[f64], budget: usize) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let shares: Vec<f64> = if total > 0.0 {
        shares.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / shares.len() as f64; shares.len()]
    };
    let quotas: Vec<f64> = shares.iter().map(|s| s * budget as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| libm::floor(q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let rem: Vec<f64> = quotas.iter().zip(&counts).map(|(q, &c)| q - c as f64).collect();
    for i in top_k_indices(&rem, budget.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Apportions `budget` across layers in proportion to `dfpqi^t`, never
/// exceeding `capacity`. Excess from full layers is redistributed over the
/// others by their shares; what cannot be placed anywhere is dropped.
pub fn allocate_budget(dfpqi: &[f64], capacity: &[usize], budget: usize, t: f64) -> Result<Allocation> {
    if dfpqi.len() != capacity.len() || dfpqi.is_empty() {
        return Err(Error::Parameter(
            "one sensitivity and one capacity per layer are required".into(),
        ));
    }
    if dfpqi.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || !(t.is_finite() && t >= 0.0) {
        return Err(Error::Parameter(
            "layer sensitivities and t must be finite and >= 0".into(),
        ));
    }
    let mut shares: Vec<f64> = dfpqi.iter().map(|&x| libm::pow(x, t)).collect();
    if shares.iter().sum::<f64>() <= 0.0 || shares.iter().any(|s| !s.is_finite()) {
        shares = vec![1.0; dfpqi.len()];
    }
    let total_cap: usize = capacity.iter().sum();
    let mut full = vec![false; dfpqi.len()];
    loop {
        let open: Vec<usize> = (0..dfpqi.len()).filter(|&i| !full[i]).collect();
        let used: usize = (0..dfpqi.len()).filter(|&i| full[i]).map(|i| capacity[i]).sum();
        let remaining = budget.saturating_sub(used);
        let mut counts: Vec<usize> = (0..dfpqi.len())
            .map(|i| if full[i] { capacity[i] } else { 0 })
            .collect();
        if open.is_empty() {
            return Ok(Allocation {
                counts,
                dropped: budget.saturating_sub(total_cap),
            });
        }
        let open_shares: Vec<f64> = open.iter().map(|&i| shares[i]).collect();
        let split = largest_remainder(&open_shares, remaining);
        let mut overflow = false;
        for (&i, &c) in open.iter().zip(&split) {
            if c > capacity[i] {
                full[i] = true;
                overflow = true;
            }
            counts[i] = c;
        }
        if !overflow {
            return Ok(Allocation { counts, dropped: 0 });
        }
    }
}

/// [`allocate_budget`] with the budget `round(Σdims · r_o / 100)`.
pub fn outlier_allocation(dfpqi: &[f64], dims: &[usize], r_o: f64, t: f64) -> Result<Allocation> {
    check_ratio("r_o", r_o)?;
    allocate_budget(dfpqi, dims, budget_of(dims.iter().sum(), r_o), t)
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&r) {
        return Err(Error::Parameter(format!(
            "{name} must be a percentage in [0, 100], got {r}"
        )));
    }
    Ok(())
}

/// Indices of the `count` entries of largest magnitude, returned ascending.
/// Equal magnitudes prefer the lower index.
pub fn select_outliers(values: &[f64], count: usize) -> Vec<usize> {
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mut idx = top_k_indices(&mags, count);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ranking {
    #[default]
    Global,
    /// Each pass splits its budget across layers in proportion to their size.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Selection {
    #[default]
    Pqi,
    /// Uniformly random outliers and significant weights with the same
    /// budgets; a control.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub quant: QuantConfig,
    /// Metric handed to the dense quantizer.
    pub metric: MetricKind,
    /// Outlier ratio, percent of all parameters.
    pub r_o: f64,
    /// Significant-weight ratio, percent of all parameters.
    pub r_s: f64,
    /// Temperature grid step.
    pub alpha: f64,
    /// Temperatures are searched below this bound.
    pub t_max: f64,
    /// Percent of all parameters detached per significant-weight pass.
    pub beta: f64,
    pub intervals: usize,
    pub rule: QuadratureRule,
    pub ranking: Ranking,
    pub selection: Selection,
    /// Lets biases be chosen as outliers or significant weights.
    pub include_bias: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            quant: QuantConfig::default(),
            metric: MetricKind::FisherDiag,
            r_o: 0.45,
            r_s: 0.05,
            alpha: 0.1,
            t_max: 1.0,
            beta: 0.025,
            intervals: pqi::DEFAULT_INTERVALS,
            rule: QuadratureRule::RightEndpoint,
            ranking: Ranking::Global,
            selection: Selection::Pqi,
            include_bias: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        check_ratio("r_o", self.r_o)?;
        check_ratio("r_s", self.r_s)?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if self.intervals == 0 {
            return Err(Error::Config("intervals must be >= 1".into()));
        }
        self.detach_steps()?;
        Ok(())
    }

    /// `r_s / β`, which must be a whole number.
    pub fn detach_steps(&self) -> Result<usize> {
        detach_steps(self.r_s, self.beta)
    }

    /// Temperature candidates `0, α, 2α, …` below `t_max`.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut ts = Vec::new();
        let mut k = 0usize;
        loop {
            let t = k as f64 * self.alpha;
            if t >= self.t_max * (1.0 - 1e-12) {
                break;
            }
            ts.push(t);
            k += 1;
        }
        ts
    }
}

fn detach_steps(r_s: f64, beta: f64) -> Result<usize> {
    if r_s == 0.0 {
        return Ok(0);
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let steps = libm::round(r_s / beta);
    if steps < 1.0 || (steps * beta - r_s).abs() > 1e-9 * r_s.max(1.0) {
        return Err(Error::Config(format!(
            "r_s = {r_s} is not a whole multiple of beta = {beta}"
        )));
    }
    Ok(steps as usize)
}

/// Whether each flat coordinate may be detached.
fn eligibility(layout: &Layout, include_bias: bool) -> Vec<bool> {
    (0..layout.total_len())
        .map(|j| include_bias || !layout.is_bias(j))
        .collect()
}

fn triplets_at(layout: &Layout, w: &WeightVector, flat: &[usize]) -> Result<SparseTriplets> {
    let entries = flat
        .iter()
        .map(|&j| Triplet {
            coord: layout.coord_of(j).expect("index within layout"),
            value: w.values[j] as f32,
        })
        .collect();
    SparseTriplets::from_unsorted(entries)
}

fn mask_of(len: usize, sets: &[&SparseTriplets], layout: &Layout) -> Vec<bool> {
    let mut m = vec![false; len];
    for s in sets {
        for t in s.iter() {
            m[layout.flat_index(t.coord).expect("validated overlay")] = true;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureTrial {
    pub t: f64,
    pub counts: Vec<usize>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierPlan {
    pub r_o: f64,
    /// Per-layer `ΔF_PQI` of the pre-quantized model.
    pub layer_dfpqi: Vec<f64>,
    pub t: f64,
    pub counts: Vec<usize>,
    pub dropped: usize,
    /// One entry per temperature candidate, ascending `t`.
    pub trace: Vec<TemperatureTrial>,
    pub outliers: SparseTriplets,
    /// The dense model re-quantized with the winning outliers detached.
    pub model: QuantizedModel,
    pub loss: f64,
}

fn quantize_with_outliers(
    w: &WeightVector,
    cfg: &QuantConfig,
    v: &SensitivityVector,
    outliers: SparseTriplets,
) -> Result<QuantizedModel> {
    let layout = w.layout();
    let exclude = mask_of(w.len(), &[&outliers], layout);
    quant::quantize_model(w, cfg, v, &exclude)?.with_overlays(outliers, SparseTriplets::empty())
}

fn pick_outliers(w: &WeightVector, eligible: &[bool], counts: &[usize]) -> Vec<usize> {
    let layout = w.layout();
    let mut flat = Vec::new();
    for (l, seg) in layout.segments().iter().enumerate() {
        let cand: Vec<usize> = (seg.offset..seg.end()).filter(|&j| eligible[j]).collect();
        let vals: Vec<f64> = cand.iter().map(|&j| w.values[j]).collect();
        flat.extend(select_outliers(&vals, counts[l]).into_iter().map(|i| cand[i]));
    }
    flat
}

/// Grid search over the outlier allocation temperature. For every
/// candidate `t`, per-layer budgets follow `layer_dfpqi^t`, each layer's
/// largest-magnitude weights are detached, the rest is re-quantized, and
/// the calibration loss is evaluated once. The lowest loss wins; ties go to
/// the smaller `t`.
pub fn outlier_ratio_search(
    spec: &ComputationSpec,
    w: &WeightVector,
    v: &SensitivityVector,
    calib: &CalibSet,
    layer_dfpqi: &[f64],
    cfg: &PipelineConfig,
) -> Result<OutlierPlan> {
    let layout = w.layout();
    let eligible = eligibility(layout, cfg.include_bias);
    let capacity: Vec<usize> = layout
        .segments()
        .iter()
        .map(|s| (s.offset..s.end()).filter(|&j| eligible[j]).count())
        .collect();
    let budget = budget_of(w.len(), cfg.r_o);
    let mut trace = Vec::new();
    let mut best: Option<(usize, Allocation, SparseTriplets, QuantizedModel)> = None;
    for t in cfg.temperatures() {
        let alloc = allocate_budget(layer_dfpqi, &capacity, budget, t)?;
        let outliers = triplets_at(layout, w, &pick_outliers(w, &eligible, &alloc.counts))?;
        let qm = quantize_with_outliers(w, &cfg.quant, v, outliers.clone())?;
        let loss = autodiff::forward_loss(spec, &quant::reconstruct(&qm)?, calib)?;
        let better = best.as_ref().is_none_or(|(i, ..)| loss < trace_loss(&trace, *i));
        trace.push(TemperatureTrial {
            t,
            counts: alloc.counts.clone(),
            loss,
        });
        if better {
            best = Some((trace.len() - 1, alloc, outliers, qm));
        }
    }
    let (i, alloc, outliers, model) = best.ok_or_else(|| Error::Config("empty temperature grid".into()))?;
    Ok(OutlierPlan {
        r_o: cfg.r_o,
        layer_dfpqi: layer_dfpqi.to_vec(),
        t: trace[i].t,
        counts: alloc.counts,
        dropped: alloc.dropped,
        loss: trace[i].loss,
        trace,
        outliers,
        model,
    })
}

fn trace_loss(trace: &[TemperatureTrial], i: usize) -> f64 {
    trace[i].loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetachStep {
    pub step: usize,
    pub coords: Vec<Coord>,
    pub dfpqi_before: f64,
    pub dfpqi_after: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetachTrace {
    pub steps: Vec<DetachStep>,
}

impl DetachTrace {
    pub fn detached(&self) -> usize {
        self.steps.iter().map(|s| s.coords.len()).sum()
    }
}

fn rank_candidates(contrib: &[f64], open: &[bool], layout: &Layout, k: usize, ranking: Ranking) -> Result<Vec<usize>> {
    let available = open.iter().filter(|&&o| o).count();
    if k > available {
        return Err(Error::Parameter(format!(
            "cannot detach {k} weights, only {available} remain eligible"
        )));
    }
    let pick = |range: core::ops::Range<usize>, k: usize| -> Vec<usize> {
        let cand: Vec<usize> = range.filter(|&j| open[j]).collect();
        let vals: Vec<f64> = cand.iter().map(|&j| contrib[j]).collect();
        top_k_indices(&vals, k).into_iter().map(|i| cand[i]).collect()
    };
    Ok(match ranking {
        Ranking::Global => pick(0..contrib.len(), k),
        Ranking::PerLayer => {
            let caps: Vec<usize> = layout
                .segments()
                .iter()
                .map(|s| (s.offset..s.end()).filter(|&j| open[j]).count())
                .collect();
            let sizes: Vec<f64> = layout.segments().iter().map(|s| s.len() as f64).collect();
            let alloc = allocate_budget(&sizes, &caps, k, 1.0)?;
            layout
                .segments()
                .iter()
                .zip(&alloc.counts)
                .flat_map(|(s, &c)| pick(s.offset..s.end(), c))
                .collect()
        }
    })
}

/// Greedy significant-weight restoration. Each of the `r_s/β` passes
/// evaluates the path integral between `w` and the current reconstruction,
/// ranks `v_PQI ⊙ |w̃ - w|` over coordinates that are neither outliers nor
/// already restored, and restores the top `round(D·β/100)` to their
/// original single-precision values.
pub fn significant_weight_search(
    spec: &ComputationSpec,
    w: &WeightVector,
    qm: &QuantizedModel,
    calib: &CalibSet,
    cfg: &PipelineConfig,
) -> Result<(SparseTriplets, DetachTrace)> {
    let steps = cfg.detach_steps()?;
    let layout = w.layout();
    let k = budget_of(w.len(), cfg.beta);
    let mut open = eligibility(layout, cfg.include_bias);
    for t in qm.outliers.iter() {
        open[layout.flat_index(t.coord).expect("validated overlay")] = false;
    }
    let mut significant = qm.significant.clone();
    let mut trace = DetachTrace::default();
    if steps == 0 {
        return Ok((significant, trace));
    }
    let mut current = qm.with_overlays(qm.outliers.clone(), significant.clone())?;
    let mut pqi = pqi::pqi_integral(spec, w, &quant::reconstruct(&current)?, calib, cfg.intervals, cfg.rule)?;
    for step in 1..=steps {
        let chosen = rank_candidates(&pqi.contributions(), &open, layout, k, cfg.ranking)?;
        for &j in &chosen {
            open[j] = false;
        }
        let added = triplets_at(layout, w, &chosen)?;
        significant = significant.merged(&added)?;
        current = qm.with_overlays(qm.outliers.clone(), significant.clone())?;
        let w_tilde = quant::reconstruct(&current)?;
        let next = pqi::pqi_integral(spec, w, &w_tilde, calib, cfg.intervals, cfg.rule)?;
        trace.steps.push(DetachStep {
            step,
            coords: added.iter().map(|t| t.coord).collect(),
            dfpqi_before: pqi.delta_f_pqi,
            dfpqi_after: next.delta_f_pqi,
            loss_after: autodiff::forward_loss(spec, &w_tilde, calib)?,
        });
        pqi = next;
    }
    Ok((significant, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: PipelineStep,
    pub calib_loss: f64,
    pub heldout_loss: Option<f64>,
    pub bits_per_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub model: QuantizedModel,
    /// Path integral between `w` and the pre-quantized model.
    pub pre_pqi: PqiResult,
    /// `None` for the random-selection control.
    pub plan: Option<OutlierPlan>,
    pub detach: DetachTrace,
    pub steps: Vec<StepReport>,
}

impl PipelineOutput {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.calib_loss)
    }
}

struct Reporter<'a> {
    spec: &'a ComputationSpec,
    calib: &'a CalibSet,
    heldout: Option<&'a CalibSet>,
    steps: Vec<StepReport>,
}

impl Reporter<'_> {
    fn record(&mut self, step: PipelineStep, qm: &QuantizedModel) -> Result<()> {
        let w_tilde = quant::reconstruct(qm)?;
        self.steps.push(StepReport {
            step,
            calib_loss: autodiff::forward_loss(self.spec, &w_tilde, self.calib)?,
            heldout_loss: self
                .heldout
                .map(|h| autodiff::forward_loss(self.spec, &w_tilde, h))
                .transpose()?,
            bits_per_weight: qm.storage().bits_per_weight(),
        });
        Ok(())
    }
}

fn random_subset(open: &[bool], k: usize, seed: u64, label: &str) -> Result<Vec<usize>> {
    let cand: Vec<usize> = (0..open.len()).filter(|&j| open[j]).collect();
    if k > cand.len() {
        return Err(Error::Parameter(format!(
            "cannot pick {k} weights, only {} remain eligible",
            cand.len()
        )));
    }
    let mut r = rng::stream(seed, label);
    let mut picked: Vec<usize> = index::sample(&mut r, cand.len(), k)
        .into_iter()
        .map(|i| cand[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Runs the six steps: pre-quantize, path integral of the pre-quantized
/// model, outlier temperature search, re-quantization without outliers,
/// significant-weight search, and assembly of the final model. Errors are
/// tagged with the step that raised them.
pub fn run_pipeline(
    spec: &ComputationSpec,
    w: &WeightVector,
    calib: &CalibSet,
    heldout: Option<&CalibSet>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    use PipelineStep::*;
    cfg.validate().map_err(|e| e.at_step(PreQuantize))?;
    autodiff::check_inputs(spec, w, calib).map_err(|e| e.at_step(PreQuantize))?;
    let mut rep = Reporter {
        spec,
        calib,
        heldout,
        steps: Vec::with_capacity(6),
    };
    let layout = w.layout();

    let v = sensitivity::compute_metric(cfg.metric, spec, w, calib).map_err(|e| e.at_step(PreQuantize))?;
    let pre = quant::quantize_model(w, &cfg.quant, &v, &vec![false; w.len()]).map_err(|e| e.at_step(PreQuantize))?;
    rep.record(PreQuantize, &pre).map_err(|e| e.at_step(PreQuantize))?;

    let pre_pqi = quant::reconstruct(&pre)
        .and_then(|wt| pqi::pqi_integral(spec, w, &wt, calib, cfg.intervals, cfg.rule))
        .map_err(|e| e.at_step(PqiAnalysis))?;
    rep.record(PqiAnalysis, &pre).map_err(|e| e.at_step(PqiAnalysis))?;

    let (plan, requantized) = match cfg.selection {
        Selection::Pqi => {
            let plan = outlier_ratio_search(spec, w, &v, calib, &pre_pqi.layer_sums, cfg)
                .map_err(|e| e.at_step(OutlierSearch))?;
            rep.record(OutlierSearch, &plan.model)
                .map_err(|e| e.at_step(OutlierSearch))?;
            let qm = plan.model.clone();
            (Some(plan), qm)
        }
        Selection::Random => {
            let open = eligibility(layout, cfg.include_bias);
            let chosen = random_subset(&open, budget_of(w.len(), cfg.r_o), cfg.seed, "random-outliers")
                .and_then(|c| triplets_at(layout, w, &c))
                .map_err(|e| e.at_step(OutlierSearch))?;
            let qm = quantize_with_outliers(w, &cfg.quant, &v, chosen).map_err(|e| e.at_step(OutlierSearch))?;
            rep.record(OutlierSearch, &qm).map_err(|e| e.at_step(OutlierSearch))?;
            (None, qm)
        }
    };
    rep.record(Requantize, &requantized)
        .map_err(|e| e.at_step(Requantize))?;

    let (significant, detach) = match cfg.selection {
        Selection::Pqi => {
            significant_weight_search(spec, w, &requantized, calib, cfg).map_err(|e| e.at_step(SignificantSearch))?
        }
        Selection::Random => {
            let mut open = eligibility(layout, cfg.include_bias);
            for t in requantized.outliers.iter() {
                open[layout.flat_index(t.coord).expect("validated overlay")] = false;
            }
            let steps = cfg.detach_steps().map_err(|e| e.at_step(SignificantSearch))?;
            let k = steps * budget_of(w.len(), cfg.beta);
            let chosen = random_subset(&open, k, cfg.seed, "random-significant")
                .and_then(|c| triplets_at(layout, w, &c))
                .map_err(|e| e.at_step(SignificantSearch))?;
            (chosen, DetachTrace::default())
        }
    };
    let detached = requantized
        .with_overlays(requantized.outliers.clone(), significant)
        .map_err(|e| e.at_step(SignificantSearch))?;
    rep.record(SignificantSearch, &detached)
        .map_err(|e| e.at_step(SignificantSearch))?;

    let mut model = detached;
    model.meta = QuantMeta {
        r_o: cfg.r_o as f32,
        r_s: cfg.r_s as f32,
        t: plan.as_ref().map_or(0.0, |p| p.t as f32),
        beta: cfg.beta as f32,
        seed: cfg.seed,
    };
    model.validate().map_err(|e| e.at_step(Finalize))?;
    rep.record(Finalize, &model).map_err(|e| e.at_step(Finalize))?;

    Ok(PipelineOutput {
        model,
        pre_pqi,
        plan,
        detach,
        steps: rep.steps,
    })
}
