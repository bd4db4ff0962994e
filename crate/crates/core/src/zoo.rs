//! Toy models and data: synthetic Gaussian classification sets, seeded
//! initialisation, deterministic SGD and weight interpolation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff;
use crate::error::{Error, Result};
use crate::model::{CalibSet, ComputationSpec, Nonlinearity, WeightVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeneratorKind {
    /// Class means on mutually orthogonal directions, so every pair of
    /// means is exactly `separation` apart. Needs `classes <= d_in`.
    OrthogonalClusters,
    /// Class means drawn i.i.d. Gaussian with expected pairwise distance
    /// `separation`.
    RandomClusters,
}

/// Gaussian class clusters with unit-variance isotropic noise (scaled by
/// `noise`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub separation: f64,
    pub noise: f64,
}

impl Default for Generator {
    fn default() -> Self {
        Generator {
            kind: GeneratorKind::OrthogonalClusters,
            separation: 4.0,
            noise: 1.0,
        }
    }
}

fn gaussian(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

fn class_means(seed: u64, d_in: usize, classes: usize, gen: &Generator) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::stream(seed, "class-means");
    match gen.kind {
        GeneratorKind::OrthogonalClusters => {
            if classes > d_in {
                return Err(Error::Config(format!(
                    "orthogonal clusters need classes ({classes}) <= d_in ({d_in})"
                )));
            }
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
            while basis.len() < classes {
                let mut v: Vec<f64> = (0..d_in).map(|_| gaussian(&mut r)).collect();
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v);
                }
            }
            let scale = gen.separation / core::f64::consts::SQRT_2;
            Ok(basis
                .into_iter()
                .map(|b| b.into_iter().map(|x| x * scale).collect())
                .collect())
        }
        GeneratorKind::RandomClusters => {
            let sd = gen.separation / libm::sqrt(2.0 * d_in as f64);
            Ok((0..classes)
                .map(|_| (0..d_in).map(|_| sd * gaussian(&mut r)).collect())
                .collect())
        }
    }
}

/// Deterministic synthetic classification data. Class means depend only on
/// `seed`, so sets of different sizes from one seed share a distribution.
/// Features are rounded onto the f32 grid.
pub fn generate_calib(seed: u64, n: usize, d_in: usize, classes: usize, gen: Generator) -> Result<CalibSet> {
    if n == 0 || d_in == 0 || classes == 0 {
        return Err(Error::Config("n, d_in and classes must all be >= 1".into()));
    }
    if !(gen.separation.is_finite() && gen.noise.is_finite() && gen.noise >= 0.0) {
        return Err(Error::Config("generator parameters must be finite".into()));
    }
    let means = class_means(seed, d_in, classes, &gen)?;
    let mut r = rng::stream(seed, "samples");
    let mut features = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.random_range(0..classes);
        for &m in &means[y] {
            let x = m + gen.noise * gaussian(&mut r);
            features.push(f64::from(x as f32));
        }
        labels.push(y as u32);
    }
    CalibSet::new(d_in, classes, features, labels)
}

/// He-normal (ReLU) or Xavier-normal (tanh) weights, zero biases, on the
/// f32 grid.
pub fn init_weights(spec: &ComputationSpec, seed: u64) -> WeightVector {
    let layout = spec.layout();
    let mut w = WeightVector::zeros(layout.clone());
    let mut r = rng::stream(seed, "init");
    for (l, seg) in layout.segments().iter().enumerate() {
        let gain = match spec.nonlinearity {
            Nonlinearity::Relu => 2.0,
            Nonlinearity::Tanh => 1.0,
        };
        let sd = libm::sqrt(gain / seg.cols as f64);
        let n = seg.weight_len();
        for v in &mut w.layer_mut(l)[..n] {
            *v = f64::from((sd * gaussian(&mut r)) as f32);
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub weights: WeightVector,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `‖∇F‖∞` on the training set at the returned weights.
    pub grad_norm_inf: f64,
}

/// Plain minibatch SGD. Batch `k` holds samples `k*B..(k+1)*B` and step `s`
/// uses batch `s mod ceil(n/B)`. The result is rounded onto the f32 grid so
/// that it survives a checkpoint round-trip unchanged.
pub fn train(spec: &ComputationSpec, init_seed: u64, data: &CalibSet, cfg: &TrainConfig) -> Result<TrainedModel> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "learning rate must be positive and batch size >= 1".into(),
        ));
    }
    let mut w = init_weights(spec, init_seed);
    let loss_before = autodiff::forward_loss(spec, &w, data)?;
    if cfg.steps > 0 {
        let n = data.len();
        let batches: Vec<CalibSet> = (0..n)
            .step_by(cfg.batch_size)
            .map(|s| data.slice(s, (s + cfg.batch_size).min(n)))
            .collect::<Result<_>>()?;
        for step in 0..cfg.steps {
            let (loss, g) = autodiff::loss_and_grad(spec, &w, &batches[step % batches.len()])?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::Diverged { step });
            }
            for (wi, gi) in w.values.iter_mut().zip(g.values()) {
                *wi -= cfg.lr * gi;
            }
        }
        w.round_to_f32();
    }
    let (loss_after, g) = autodiff::loss_and_grad(spec, &w, data)?;
    if !loss_after.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok(TrainedModel {
        weights: w,
        loss_before,
        loss_after,
        grad_norm_inf: g.norm_inf(),
    })
}

/// `(1-λ)·w + λ·w̃`, elementwise.
pub fn interpolate(w: &WeightVector, w_tilde: &WeightVector, lambda: f64) -> Result<WeightVector> {
    w.check_same_layout(w_tilde)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("λ = {lambda} is outside [0, 1]")));
    }
    let values = w
        .values
        .iter()
        .zip(&w_tilde.values)
        .map(|(&a, &b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    WeightVector::new(w.layout().clone(), values)
}

/// Everything an experiment needs: a trained model plus disjoint training,
/// calibration and held-out sets drawn from one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub spec: ComputationSpec,
    pub generator: Generator,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub heldout_samples: usize,
    pub train: TrainConfig,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            spec: ComputationSpec::default_rig(),
            generator: Generator::default(),
            train_samples: 1024,
            calib_samples: 256,
            heldout_samples: 256,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rig {
    pub seed: u64,
    pub spec: ComputationSpec,
    pub weights: WeightVector,
    pub train_set: CalibSet,
    pub calib: CalibSet,
    pub heldout: CalibSet,
    pub trained: TrainedModel,
}

pub fn build_rig(seed: u64, cfg: &RigConfig) -> Result<Rig> {
    let (nt, nc, nh) = (cfg.train_samples, cfg.calib_samples, cfg.heldout_samples);
    if nt == 0 || nc == 0 || nh == 0 {
        return Err(Error::Config("every data split needs at least one sample".into()));
    }
    let all = generate_calib(
        rng::derive_seed(seed, "data"),
        nt + nc + nh,
        cfg.spec.d_in,
        cfg.spec.classes,
        cfg.generator,
    )?;
    let train_set = all.slice(0, nt)?;
    let calib = all.slice(nt, nt + nc)?;
    let heldout = all.slice(nt + nc, nt + nc + nh)?;
    let trained = train(&cfg.spec, rng::derive_seed(seed, "model"), &train_set, &cfg.train)?;
    Ok(Rig {
        seed,
        spec: cfg.spec.clone(),
        weights: trained.weights.clone(),
        train_set,
        calib,
        heldout,
        trained,
    })
}

/// Pads `n` samples of zeros; handy for shape checks.
pub fn zero_calib(n: usize, d_in: usize, classes: usize) -> Result<CalibSet> {
    CalibSet::new(d_in, classes, vec![0.0; n * d_in], vec![0; n])
}
