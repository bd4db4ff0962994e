//! Sensitivity-weighted 1-D k-means for codebook quantization.
//!
//! Minimises `Σ_j v_j (T[a(j)] - w_j)²` with seeded k-means++ initialisation
//! followed by Lloyd iterations. Equidistant points go to the lower centroid
//! index; the final codebook is sorted ascending.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Sorted ascending.
    pub codebook: Vec<f64>,
    /// One index per input value, including excluded ones.
    pub assignments: Vec<u32>,
    /// Weighted objective after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

fn nearest(codebook: &[f64], x: f64) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in codebook.iter().enumerate() {
        let d = (c - x) * (c - x);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

fn seed_centroids(points: &[f64], weights: &[f64], k: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "kmeans++");
    let mut centroids = Vec::with_capacity(k);
    let total: f64 = weights.iter().sum();
    let first = if total > 0.0 { pick(&mut r, weights, total) } else { 0 };
    centroids.push(points[first]);
    let mut dist: Vec<f64> = points
        .iter()
        .map(|&p| (p - points[first]) * (p - points[first]))
        .collect();
    while centroids.len() < k {
        let scores: Vec<f64> = weights.iter().zip(&dist).map(|(w, d)| w * d).collect();
        let s: f64 = scores.iter().sum();
        let next = if s > 0.0 {
            pick(&mut r, &scores, s)
        } else {
            // Every weighted point is covered; fall back to the farthest one.
            argmax(&dist)
        };
        let c = points[next];
        centroids.push(c);
        for (d, &p) in dist.iter_mut().zip(points) {
            *d = d.min((p - c) * (p - c));
        }
    }
    centroids
}

fn pick(r: &mut impl Rng, scores: &[f64], total: f64) -> usize {
    let u = r.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 {
            acc += s;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits a `k`-entry codebook to `values` weighted by `weights`. Entries
/// flagged in `exclude` take no part in the fit and are assigned the
/// centroid nearest to zero.
pub fn quantize_kmeans(
    values: &[f64],
    weights: &[f64],
    exclude: &[bool],
    k: usize,
    seed: u64,
    iters: usize,
) -> KMeansFit {
    assert!(k >= 1);
    debug_assert!(weights.iter().all(|&v| v >= 0.0));
    let idx: Vec<usize> = (0..values.len()).filter(|&i| !exclude[i]).collect();
    let points: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    let pw: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();

    if points.is_empty() {
        return KMeansFit {
            codebook: vec![0.0; k],
            assignments: vec![0; values.len()],
            objective_trace: vec![0.0],
        };
    }

    let mut centroids = seed_centroids(&points, &pw, k, seed);
    let mut assign = vec![usize::MAX; points.len()];
    let mut cost = vec![0.0; points.len()];
    let mut trace = Vec::new();

    for it in 0..=iters {
        let mut changed = false;
        for (j, &p) in points.iter().enumerate() {
            let (a, d) = nearest(&centroids, p);
            if a != assign[j] {
                assign[j] = a;
                changed = true;
            }
            cost[j] = pw[j] * d;
        }
        trace.push(cost.iter().sum());
        if (!changed && it > 0) || it == iters {
            break;
        }

        let mut num = vec![0.0; k];
        let mut den = vec![0.0; k];
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for (j, &p) in points.iter().enumerate() {
            let a = assign[j];
            num[a] += pw[j] * p;
            den[a] += pw[j];
            lo[a] = lo[a].min(p);
            hi[a] = hi[a].max(p);
        }
        let mut empty = Vec::new();
        for c in 0..k {
            if den[c] > 0.0 {
                // Clamping keeps a cluster of identical values exact.
                centroids[c] = (num[c] / den[c]).clamp(lo[c], hi[c]);
            } else {
                empty.push(c);
            }
        }
        for c in empty {
            let far = argmax(&cost);
            if cost[far] > 0.0 {
                centroids[c] = points[far];
                cost[far] = 0.0;
            }
        }
    }

    // Sort the codebook and remap.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let codebook: Vec<f64> = order.iter().map(|&o| centroids[o]).collect();
    let mut assignments = vec![0u32; values.len()];
    let zero_slot = nearest(&codebook, 0.0).0 as u32;
    for (i, e) in exclude.iter().enumerate() {
        if *e {
            assignments[i] = zero_slot;
        }
    }
    for (j, &i) in idx.iter().enumerate() {
        assignments[i] = nearest(&codebook, points[j]).0 as u32;
    }
    KMeansFit {
        codebook,
        assignments,
        objective_trace: trace,
    }
}

/// `Σ_j v_j (T[a(j)] - w_j)²` over non-excluded entries.
pub fn weighted_objective(
    values: &[f64],
    weights: &[f64],
    exclude: &[bool],
    codebook: &[f64],
    assignments: &[u32],
) -> f64 {
    (0..values.len())
        .filter(|&i| !exclude[i])
        .map(|i| {
            let e = codebook[assignments[i] as usize] - values[i];
            weights[i] * e * e
        })
        .sum()
}
