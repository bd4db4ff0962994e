//! Pre-quantization sensitivity metrics and the Taylor predictors of the
//! loss change `ΔF = F(w̃) - F(w)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{self, GradientVector};
use crate::error::{Error, Result};
use crate::model::{CalibSet, ComputationSpec, WeightVector};
use crate::quant::{self, QuantConfig};
use crate::zoo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Gradient,
    Activation,
    FisherDiag,
    Pqi,
}

/// Nonnegative per-parameter importance.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityVector {
    pub values: Vec<f64>,
    pub kind: MetricKind,
}

impl SensitivityVector {
    pub fn new(values: Vec<f64>, kind: MetricKind) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter(format!(
                "sensitivity entry {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(SensitivityVector { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of the `k` largest entries, largest first; ties go to the
    /// lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k_indices(&self.values, k)
    }
}

pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Sign applied to the Fisher diagonal when it stands in for the Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FisherSign {
    /// `H ≈ -(1/n) Σ ∇f ∇fᵀ`, which makes the quadratic term nonpositive.
    #[default]
    Negative,
    /// `H ≈ +(1/n) Σ ∇f ∇fᵀ`.
    Positive,
}

impl FisherSign {
    pub fn factor(self) -> f64 {
        match self {
            FisherSign::Negative => -1.0,
            FisherSign::Positive => 1.0,
        }
    }
}

/// `|∇F(w)|` elementwise.
pub fn metric_gradient(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<SensitivityVector> {
    let g = autodiff::grad(spec, w, calib)?;
    SensitivityVector::new(g.0.iter().map(|x| x.abs()).collect(), MetricKind::Gradient)
}

/// Mean absolute input activation of each layer, broadcast along the
/// output dimension. Bias entries see a constant input of one.
pub fn metric_activation(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<SensitivityVector> {
    let stats = autodiff::activation_stats(spec, w, calib)?;
    let mut values = vec![0.0; w.len()];
    for (seg, s) in w.layout().segments().iter().zip(&stats) {
        let dst = &mut values[seg.offset..seg.end()];
        let (wpart, bpart) = dst.split_at_mut(seg.weight_len());
        for row in wpart.chunks_mut(seg.cols) {
            row.copy_from_slice(s);
        }
        bpart.iter_mut().for_each(|b| *b = 1.0);
    }
    SensitivityVector::new(values, MetricKind::Activation)
}

/// `(1/n) Σ_i (∇f(w; x_i))²` elementwise.
pub fn metric_fisher_diag(spec: &ComputationSpec, w: &WeightVector, calib: &CalibSet) -> Result<SensitivityVector> {
    let mut acc = vec![0.0; w.len()];
    autodiff::for_each_sample_grad(spec, w, calib, |_, _, g| {
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi * gi;
        }
    })?;
    let n = calib.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    SensitivityVector::new(acc, MetricKind::FisherDiag)
}

fn displacement(w: &WeightVector, w_tilde: &WeightVector) -> Result<Vec<f64>> {
    w.check_same_layout(w_tilde)?;
    Ok(w_tilde.values.iter().zip(&w.values).map(|(a, b)| a - b).collect())
}

/// Any metric computable from the unquantized model alone.
pub fn compute_metric(
    kind: MetricKind,
    spec: &ComputationSpec,
    w: &WeightVector,
    calib: &CalibSet,
) -> Result<SensitivityVector> {
    match kind {
        MetricKind::Gradient => metric_gradient(spec, w, calib),
        MetricKind::Activation => metric_activation(spec, w, calib),
        MetricKind::FisherDiag => metric_fisher_diag(spec, w, calib),
        MetricKind::Pqi => Err(Error::Config("the PQI metric needs a quantized model".into())),
    }
}

/// `∇F(w)ᵀ(w̃ - w)` with a precomputed gradient.
pub fn first_order_term(g: &GradientVector, w: &WeightVector, w_tilde: &WeightVector) -> Result<f64> {
    Ok(g.dot(&displacement(w, w_tilde)?))
}

/// `½ Σ_j sign·fisher_j·(w̃_j - w_j)²` with a precomputed Fisher diagonal.
pub fn second_order_term(
    fisher: &SensitivityVector,
    sign: FisherSign,
    w: &WeightVector,
    w_tilde: &WeightVector,
) -> Result<f64> {
    let d = displacement(w, w_tilde)?;
    let q: f64 = fisher.values.iter().zip(&d).map(|(h, x)| h * x * x).sum();
    Ok(0.5 * sign.factor() * q)
}

pub fn taylor_first(spec: &ComputationSpec, w: &WeightVector, w_tilde: &WeightVector, calib: &CalibSet) -> Result<f64> {
    first_order_term(&autodiff::grad(spec, w, calib)?, w, w_tilde)
}

pub fn taylor_second(
    spec: &ComputationSpec,
    w: &WeightVector,
    w_tilde: &WeightVector,
    calib: &CalibSet,
    sign: FisherSign,
) -> Result<f64> {
    second_order_term(&metric_fisher_diag(spec, w, calib)?, sign, w, w_tilde)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorRow {
    /// Layer name, `"All"`, or the interpolation factor.
    pub scope: String,
    pub lambda: Option<f64>,
    pub first_order: f64,
    pub second_order: f64,
    pub actual: f64,
    pub actual_heldout: Option<f64>,
}

impl TaylorRow {
    /// `actual / |first + second|`.
    pub fn underestimation(&self) -> f64 {
        self.actual / (self.first_order + self.second_order).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaylorReport {
    pub rows: Vec<TaylorRow>,
}

impl TaylorReport {
    pub fn row(&self, scope: &str) -> Option<&TaylorRow> {
        self.rows.iter().find(|r| r.scope == scope)
    }

    /// Sum of the single-layer `actual` values (all rows except `"All"`).
    pub fn sum_of_layers(&self) -> f64 {
        self.rows.iter().filter(|r| r.scope != "All").map(|r| r.actual).sum()
    }

    /// `|Σ_layers ΔF - ΔF_all| / |ΔF_all|`.
    pub fn layer_non_additivity(&self) -> Option<f64> {
        let all = self.row("All")?.actual;
        Some((self.sum_of_layers() - all).abs() / all.abs())
    }
}

struct Baseline<'a> {
    spec: &'a ComputationSpec,
    w: &'a WeightVector,
    calib: &'a CalibSet,
    heldout: Option<&'a CalibSet>,
    sign: FisherSign,
    f: f64,
    f_heldout: Option<f64>,
    grad: GradientVector,
    fisher: SensitivityVector,
}

impl<'a> Baseline<'a> {
    fn new(
        spec: &'a ComputationSpec,
        w: &'a WeightVector,
        calib: &'a CalibSet,
        heldout: Option<&'a CalibSet>,
        sign: FisherSign,
    ) -> Result<Self> {
        let (f, grad) = autodiff::loss_and_grad(spec, w, calib)?;
        Ok(Baseline {
            spec,
            w,
            calib,
            heldout,
            sign,
            f,
            f_heldout: heldout.map(|h| autodiff::forward_loss(spec, w, h)).transpose()?,
            grad,
            fisher: metric_fisher_diag(spec, w, calib)?,
        })
    }

    fn row(&self, scope: String, lambda: Option<f64>, w_tilde: &WeightVector) -> Result<TaylorRow> {
        let actual_heldout = match (self.heldout, self.f_heldout) {
            (Some(h), Some(f0)) => Some(autodiff::forward_loss(self.spec, w_tilde, h)? - f0),
            _ => None,
        };
        Ok(TaylorRow {
            scope,
            lambda,
            first_order: first_order_term(&self.grad, self.w, w_tilde)?,
            second_order: second_order_term(&self.fisher, self.sign, self.w, w_tilde)?,
            actual: autodiff::forward_loss(self.spec, w_tilde, self.calib)? - self.f,
            actual_heldout,
        })
    }
}

/// Quantizes one layer at a time (others stay in full precision), then all
/// layers at once, with no detached outliers. One row per scope.
pub fn layer_study(
    spec: &ComputationSpec,
    w: &WeightVector,
    calib: &CalibSet,
    heldout: Option<&CalibSet>,
    cfg: &QuantConfig,
    v: &SensitivityVector,
    sign: FisherSign,
) -> Result<TaylorReport> {
    let base = Baseline::new(spec, w, calib, heldout, sign)?;
    let qm = quant::quantize_model(w, cfg, v, &vec![false; w.len()])?;
    let all = quant::reconstruct(&qm)?;
    let mut rows = Vec::with_capacity(w.layout().num_layers() + 1);
    for (l, seg) in w.layout().segments().iter().enumerate() {
        let mut single = w.clone();
        single.layer_mut(l).copy_from_slice(all.layer(l));
        rows.push(base.row(seg.name.clone(), None, &single)?);
    }
    rows.push(base.row("All".into(), None, &all)?);
    Ok(TaylorReport { rows })
}

/// Rows at `w' = (1-λ)w + λw̃` for every `λ` in `lambdas`.
pub fn lambda_study(
    spec: &ComputationSpec,
    w: &WeightVector,
    w_tilde: &WeightVector,
    calib: &CalibSet,
    heldout: Option<&CalibSet>,
    lambdas: &[f64],
    sign: FisherSign,
) -> Result<TaylorReport> {
    if let Some(&bad) = lambdas.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
        return Err(Error::Parameter(format!("λ = {bad} is outside (0, 1]")));
    }
    let base = Baseline::new(spec, w, calib, heldout, sign)?;
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let wp = zoo::interpolate(w, w_tilde, lambda)?;
            base.row(format!("{lambda:e}"), Some(lambda), &wp)
        })
        .collect::<Result<_>>()?;
    Ok(TaylorReport { rows })
}
