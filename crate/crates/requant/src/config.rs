//! Experiment configuration: a TOML file, command-line overrides, and the
//! hash embedded in every report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use requant_core::quant::{IntRange, Preprocess, QuantConfig, QuantMode};
use requant_core::requant::{PipelineConfig, Ranking, Selection};
use requant_core::zoo::{Generator, GeneratorKind, RigConfig, TrainConfig};
use requant_core::{ComputationSpec, FisherSign, LossKind, MetricKind, Nonlinearity, QuadratureRule};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorName {
    Orthogonal,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Uniform,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeName {
    FullScale,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessName {
    Identity,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    Gradient,
    Activation,
    Fisher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Right,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingName {
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignName {
    Negative,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: ActivationName,
    pub bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_in: 32,
            hidden: vec![64, 64],
            classes: 8,
            activation: ActivationName::Relu,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: GeneratorName,
    pub separation: f64,
    pub noise: f64,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub heldout_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            generator: GeneratorName::Orthogonal,
            separation: 4.0,
            noise: 1.0,
            train_samples: 1024,
            calib_samples: 256,
            heldout_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub bits: u8,
    pub mode: ModeName,
    pub group_size: usize,
    pub kmeans_iters: usize,
    pub range: RangeName,
    pub preprocess: PreprocessName,
    pub activation_exponent: f64,
    pub metric: MetricName,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            bits: 3,
            mode: ModeName::Uniform,
            group_size: 32,
            kmeans_iters: 50,
            range: RangeName::Symmetric,
            preprocess: PreprocessName::Identity,
            activation_exponent: 0.5,
            metric: MetricName::Fisher,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PqiSection {
    pub intervals: usize,
    pub rule: RuleName,
    /// Interval counts of the quadrature error table.
    pub interval_sweep: Vec<usize>,
    /// Percentiles of the coverage table.
    pub coverage: Vec<f64>,
}

impl Default for PqiSection {
    fn default() -> Self {
        PqiSection {
            intervals: 32,
            rule: RuleName::Right,
            interval_sweep: vec![1, 2, 4, 8, 16, 32, 64],
            coverage: vec![0.05, 0.5, 1.0, 5.0, 10.0, 25.0, 50.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequantSection {
    pub ro: f64,
    pub rs: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t_max: f64,
    pub ranking: RankingName,
    pub include_bias: bool,
    /// Step sizes of the ablation's `β` sweep.
    pub beta_sweep: Vec<f64>,
}

impl Default for RequantSection {
    fn default() -> Self {
        RequantSection {
            ro: 0.45,
            rs: 0.05,
            alpha: 0.1,
            beta: 0.025,
            t_max: 1.0,
            ranking: RankingName::Global,
            include_bias: false,
            beta_sweep: vec![0.05, 0.025, 0.0125],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaylorSection {
    pub lambdas: Vec<f64>,
    pub fisher_sign: SignName,
}

impl Default for TaylorSection {
    fn default() -> Self {
        TaylorSection {
            lambdas: vec![1.0, 1e-1, 1e-2, 1e-3],
            fisher_sign: SignName::Negative,
        }
    }
}

/// Input files. When `checkpoint` is unset, the model and data are rebuilt
/// from the seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub checkpoint: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub pqi: PqiSection,
    pub requant: RequantSection,
    pub taylor: TaylorSection,
    pub input: InputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            quant: QuantSection::default(),
            pqi: PqiSection::default(),
            requant: RequantSection::default(),
            taylor: TaylorSection::default(),
            input: InputSection::default(),
        }
    }
}

/// Command-line values that replace config file entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub bits: Option<u8>,
    pub group_size: Option<usize>,
    pub mode: Option<ModeName>,
    pub ro: Option<f64>,
    pub rs: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub intervals: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = o.$src.clone() {
                    self.$($dst)+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(out_dir => out_dir);
        set!(bits => quant.bits);
        set!(group_size => quant.group_size);
        set!(mode => quant.mode);
        set!(ro => requant.ro);
        set!(rs => requant.rs);
        set!(alpha => requant.alpha);
        set!(beta => requant.beta);
        set!(intervals => pqi.intervals);
        self.validate()
    }

    /// Converts every section to its library form, reporting the first
    /// invalid value.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.pipeline_config()?.validate()?;
        if self.taylor.lambdas.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::Config("taylor.lambdas must lie in (0, 1]".into()));
        }
        if self.pqi.interval_sweep.contains(&0) {
            return Err(Error::Config("pqi.interval_sweep entries must be >= 1".into()));
        }
        if self.pqi.coverage.iter().any(|&p| !(0.0..=100.0).contains(&p)) {
            return Err(Error::Config("pqi.coverage entries must be percentages".into()));
        }
        if self.data.train_samples == 0 || self.data.calib_samples == 0 || self.data.heldout_samples == 0 {
            return Err(Error::Config("every data split needs at least one sample".into()));
        }
        if !(self.data.noise > 0.0 && self.data.separation >= 0.0) {
            return Err(Error::Config("data.noise must be > 0 and data.separation >= 0".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) || self.train.batch_size == 0 {
            return Err(Error::Config(
                "train.lr must be positive and train.batch_size >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `sha256` of the canonical TOML serialization, as lowercase hex. The
    /// output directory is left out so that relocated runs hash alike.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let text = toml::to_string(&canonical).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn spec(&self) -> Result<ComputationSpec> {
        let m = &self.model;
        let mut spec = ComputationSpec::new(
            m.d_in,
            m.hidden.clone(),
            m.classes,
            match m.activation {
                ActivationName::Relu => Nonlinearity::Relu,
                ActivationName::Tanh => Nonlinearity::Tanh,
            },
        )?;
        spec.loss = LossKind::SoftmaxCrossEntropy;
        spec.bias = m.bias;
        Ok(spec)
    }

    pub fn rig_config(&self) -> Result<RigConfig> {
        Ok(RigConfig {
            spec: self.spec()?,
            generator: Generator {
                kind: match self.data.generator {
                    GeneratorName::Orthogonal => GeneratorKind::OrthogonalClusters,
                    GeneratorName::Random => GeneratorKind::RandomClusters,
                },
                separation: self.data.separation,
                noise: self.data.noise,
            },
            train_samples: self.data.train_samples,
            calib_samples: self.data.calib_samples,
            heldout_samples: self.data.heldout_samples,
            train: TrainConfig {
                steps: self.train.steps,
                lr: self.train.lr,
                batch_size: self.train.batch_size,
            },
        })
    }

    pub fn quant_config(&self) -> QuantConfig {
        let q = &self.quant;
        QuantConfig {
            bits: q.bits,
            mode: match q.mode {
                ModeName::Uniform => QuantMode::UniformGroup {
                    group_size: q.group_size,
                },
                ModeName::Kmeans => QuantMode::KMeansCodebook { iters: q.kmeans_iters },
            },
            range: match q.range {
                RangeName::FullScale => IntRange::FullScale,
                RangeName::Symmetric => IntRange::SymmetricStandard,
            },
            preprocess: match q.preprocess {
                PreprocessName::Identity => Preprocess::Identity,
                PreprocessName::Activation => Preprocess::ActivationScale {
                    exponent: q.activation_exponent,
                },
            },
            seed: self.seed,
        }
    }

    pub fn metric(&self) -> MetricKind {
        match self.quant.metric {
            MetricName::Gradient => MetricKind::Gradient,
            MetricName::Activation => MetricKind::Activation,
            MetricName::Fisher => MetricKind::FisherDiag,
        }
    }

    pub fn rule(&self) -> QuadratureRule {
        match self.pqi.rule {
            RuleName::Right => QuadratureRule::RightEndpoint,
            RuleName::Midpoint => QuadratureRule::Midpoint,
        }
    }

    pub fn fisher_sign(&self) -> FisherSign {
        match self.taylor.fisher_sign {
            SignName::Negative => FisherSign::Negative,
            SignName::Positive => FisherSign::Positive,
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let r = &self.requant;
        let cfg = PipelineConfig {
            quant: self.quant_config(),
            metric: self.metric(),
            r_o: r.ro,
            r_s: r.rs,
            alpha: r.alpha,
            t_max: r.t_max,
            beta: r.beta,
            intervals: self.pqi.intervals,
            rule: self.rule(),
            ranking: match r.ranking {
                RankingName::Global => Ranking::Global,
                RankingName::PerLayer => Ranking::PerLayer,
            },
            selection: Selection::Pqi,
            include_bias: r.include_bias,
            seed: self.seed,
        };
        Ok(cfg)
    }
}
