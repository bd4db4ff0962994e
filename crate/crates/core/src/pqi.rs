//! Post-quantization integral.
//!
//! The loss change is the line integral of the gradient along the straight
//! path from `w` to `w̃`:
//!
//! ```text
//! ΔF = [∫₀¹ ∇F(w + t(w̃ - w)) dt]ᵀ (w̃ - w)
//! ```
//!
//! The integral is approximated with `N` rectangles on the right endpoints
//! `t_i = i/N`. Taking the elementwise magnitude of the averaged gradient
//! gives the sensitivity `v`, and `Σ_j v_j |w̃_j - w_j|` bounds `|ΔF|` over
//! the same nodes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::model::{CalibSet, ComputationSpec, Layout, WeightVector};
use crate::quant::groups_per_row;
use crate::sensitivity::{MetricKind, SensitivityVector};

/// Default number of intervals.
pub const DEFAULT_INTERVALS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum QuadratureRule {
    /// Nodes `i/N`, `i = 1..=N`.
    #[default]
    RightEndpoint,
    /// Nodes `(i - ½)/N`.
    Midpoint,
}

impl QuadratureRule {
    pub fn node(self, i: usize, intervals: usize) -> f64 {
        match self {
            QuadratureRule::RightEndpoint => i as f64 / intervals as f64,
            QuadratureRule::Midpoint => (i as f64 - 0.5) / intervals as f64,
        }
    }
}

/// Averaged gradient magnitudes and the signed quadrature of `ΔF` along the
/// straight path between two points, for any gradient oracle.
pub fn path_integral(
    start: &[f64],
    end: &[f64],
    intervals: usize,
    rule: QuadratureRule,
    mut gradient: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, f64)> {
    if intervals == 0 {
        return Err(Error::Parameter("the number of intervals must be >= 1".into()));
    }
    if start.len() != end.len() {
        return Err(Error::Layout("path endpoints differ in length".into()));
    }
    let delta: Vec<f64> = end.iter().zip(start).map(|(a, b)| a - b).collect();
    let mut v = vec![0.0; start.len()];
    let mut signed = 0.0;
    let mut point = vec![0.0; start.len()];
    for i in 1..=intervals {
        let t = rule.node(i, intervals);
        for ((p, &s), &d) in point.iter_mut().zip(start).zip(&delta) {
            *p = s + t * d;
        }
        let g = gradient(&point)?;
        if g.len() != start.len() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { node: i });
        }
        let mut dot = 0.0;
        for ((vj, gj), dj) in v.iter_mut().zip(&g).zip(&delta) {
            *vj += gj.abs();
            dot += gj * dj;
        }
        signed += dot;
    }
    let n = intervals as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok((v, signed / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqiResult {
    pub v_pqi: SensitivityVector,
    pub intervals: usize,
    pub rule: QuadratureRule,
    /// Quadrature of `ΔF` itself, signs kept.
    pub signed_delta_f: f64,
    /// `Σ_j v_j |Δw_j|`.
    pub delta_f_pqi: f64,
    /// `|w̃ - w|`.
    pub abs_delta: Vec<f64>,
    pub layout: Layout,
    /// `Σ v_j |Δw_j|` within each layer.
    pub layer_sums: Vec<f64>,
}

impl PqiResult {
    /// Elementwise `v ⊙ |Δw|`.
    pub fn contributions(&self) -> Vec<f64> {
        self.v_pqi
            .values
            .iter()
            .zip(&self.abs_delta)
            .map(|(v, d)| v * d)
            .collect()
    }

    /// `delta_f_pqi` recomputed from `v` and `|Δw|`.
    pub fn recomputed_bound(&self) -> f64 {
        self.contributions().iter().sum()
    }

    /// Mean contribution per parameter of each layer.
    pub fn layer_means(&self) -> Vec<f64> {
        self.layer_sums
            .iter()
            .zip(self.layout.segments())
            .map(|(s, seg)| s / seg.len() as f64)
            .collect()
    }
}

pub fn pqi_integral(
    spec: &ComputationSpec,
    w: &WeightVector,
    w_tilde: &WeightVector,
    calib: &CalibSet,
    intervals: usize,
    rule: QuadratureRule,
) -> Result<PqiResult> {
    w.check_same_layout(w_tilde)?;
    autodiff::check_inputs(spec, w, calib)?;
    let layout = w.layout().clone();
    let (v, signed) = path_integral(&w.values, &w_tilde.values, intervals, rule, |p| {
        let point = WeightVector::new(layout.clone(), p.to_vec())?;
        Ok(autodiff::grad(spec, &point, calib)?.0)
    })?;
    let abs_delta: Vec<f64> = w_tilde
        .values
        .iter()
        .zip(&w.values)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let layer_sums: Vec<f64> = layout
        .segments()
        .iter()
        .map(|s| (s.offset..s.end()).map(|j| v[j] * abs_delta[j]).sum())
        .collect();
    let delta_f_pqi = v.iter().zip(&abs_delta).map(|(a, b)| a * b).sum();
    Ok(PqiResult {
        v_pqi: SensitivityVector::new(v, MetricKind::Pqi)?,
        intervals,
        rule,
        signed_delta_f: signed,
        delta_f_pqi,
        abs_delta,
        layout,
        layer_sums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// One partition holding every parameter.
    All,
    Element,
    /// Quantization groups of `group_size` columns per row, bias separately.
    Group {
        group_size: usize,
    },
    Layer,
    /// Weight matrix and bias of each layer.
    Sublayer,
}

impl Granularity {
    /// `all`, `element`, `layer`, `sublayer` or `group:<size>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Granularity::All),
            "element" => Ok(Granularity::Element),
            "layer" => Ok(Granularity::Layer),
            "sublayer" => Ok(Granularity::Sublayer),
            _ => match s.strip_prefix("group:").map(str::parse::<usize>) {
                Some(Ok(g)) if g > 0 => Ok(Granularity::Group { group_size: g }),
                _ => Err(Error::Parameter(format!("unknown granularity '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub label: String,
    pub count: usize,
    pub sum: f64,
    pub mean: f64,
}

fn push_row(rows: &mut Vec<AggregateRow>, label: String, contrib: &[f64]) {
    let sum: f64 = contrib.iter().sum();
    rows.push(AggregateRow {
        label,
        count: contrib.len(),
        sum,
        mean: if contrib.is_empty() {
            0.0
        } else {
            sum / contrib.len() as f64
        },
    });
}

/// Sums and means of `v ⊙ |Δw|` over a partition of the parameters.
pub fn aggregate(result: &PqiResult, granularity: Granularity) -> Vec<AggregateRow> {
    let c = result.contributions();
    let mut rows = Vec::new();
    match granularity {
        Granularity::All => push_row(&mut rows, "all".into(), &c),
        Granularity::Element => {
            for (j, x) in c.iter().enumerate() {
                let coord = result.layout.coord_of(j).expect("index within layout");
                let seg = result.layout.segment(coord.layer as usize);
                let label = if coord.col as usize == seg.cols {
                    format!("{}/bias/{}", seg.name, coord.row)
                } else {
                    format!("{}/{}/{}", seg.name, coord.row, coord.col)
                };
                push_row(&mut rows, label, core::slice::from_ref(x));
            }
        }
        Granularity::Layer => {
            for seg in result.layout.segments() {
                push_row(&mut rows, seg.name.clone(), &c[seg.offset..seg.end()]);
            }
        }
        Granularity::Sublayer => {
            for seg in result.layout.segments() {
                let mid = seg.offset + seg.weight_len();
                push_row(&mut rows, format!("{}.weight", seg.name), &c[seg.offset..mid]);
                if seg.has_bias {
                    push_row(&mut rows, format!("{}.bias", seg.name), &c[mid..seg.end()]);
                }
            }
        }
        Granularity::Group { group_size } => {
            for seg in result.layout.segments() {
                let gpr = groups_per_row(seg.cols, group_size);
                for r in 0..seg.rows {
                    for g in 0..gpr {
                        let lo = seg.offset + r * seg.cols + g * group_size;
                        let hi = seg.offset + r * seg.cols + ((g + 1) * group_size).min(seg.cols);
                        push_row(&mut rows, format!("{}/r{}/g{}", seg.name, r, g), &c[lo..hi]);
                    }
                }
                let base = seg.offset + seg.weight_len();
                for (g, chunk) in c[base..seg.end()].chunks(group_size).enumerate() {
                    push_row(&mut rows, format!("{}/bias/g{}", seg.name, g), chunk);
                }
            }
        }
    }
    rows
}

/// Cumulative share of `delta_f_pqi` covered by the top-ranked
/// contributions: entry `k-1` is the share of the `k` largest.
pub fn coverage_by_rank(result: &PqiResult) -> Vec<f64> {
    let mut c = result.contributions();
    c.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = c.iter().sum();
    if total <= 0.0 {
        return vec![0.0; c.len()];
    }
    let mut acc = 0.0;
    c.iter()
        .map(|x| {
            acc += x;
            (acc / total).min(1.0)
        })
        .collect()
}

/// `(p, share)` pairs: the share of `delta_f_pqi` covered by the top `p`
/// percent of parameters (rounded up to whole parameters).
pub fn coverage_curve(result: &PqiResult, percents: &[f64]) -> Vec<(f64, f64)> {
    let ranks = coverage_by_rank(result);
    let n = ranks.len();
    percents
        .iter()
        .map(|&p| {
            let k = libm::ceil(n as f64 * p / 100.0).clamp(0.0, n as f64) as usize;
            let share = if k == 0 {
                0.0
            } else if k == n && ranks[n - 1] > 0.0 {
                1.0
            } else {
                ranks[k - 1]
            };
            (p, share)
        })
        .collect()
}
