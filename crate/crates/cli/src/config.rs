//! Run configuration: a TOML file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use darknight::masking::NoiseSpec;
use darknight::pipeline::{LayerSpec, Loss, Perturbation, TamperPolicy, DEFAULT_THRESHOLD};
use darknight::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Synthetic {
    Blobs,
    Xor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    SoftmaxCrossEntropy,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => Loss::Mse,
            LossArg::SoftmaxCrossEntropy => Loss::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the trusted-side key streams.
    pub seed: u64,
    /// Virtual batch size.
    pub k: usize,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub integrity: IntegritySection,
    pub verify: VerifySection,
    pub bound: BoundSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mean: f64,
    pub variance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Path to a saved `manifest.toml`.
    pub manifest: Option<PathBuf>,
    /// Architecture initialized from `seed` when no manifest is given.
    pub layers: Option<Vec<LayerSpec>>,
    pub seed: u64,
    /// Hidden width of the default two-layer model.
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Used when `inputs` is empty.
    pub synthetic: Synthetic,
    pub samples: usize,
    pub seed: u64,
    /// DKTENSOR files, one sample each.
    pub inputs: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub loss: Loss,
    /// Directory receiving the model and the metrics log.
    pub output: PathBuf,
    /// Run the plain trainer alongside and report the weight divergence.
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegritySection {
    pub enabled: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// `layer:equation:epsilon[:entry]`.
    pub tamper: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub c1: f64,
    pub ratio: f64,
    /// Defaults to the noise variance.
    pub sigma_sq: Option<f64>,
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k: 4,
            noise: NoiseConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainSection::default(),
            integrity: IntegritySection::default(),
            verify: VerifySection::default(),
            bound: BoundSection::default(),
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { mean: 0.0, variance: 4e8, seed: 0 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { manifest: None, layers: None, seed: 0, hidden: 8 }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synthetic: Synthetic::Blobs, samples: 64, seed: 0, inputs: Vec::new(), targets: Vec::new() }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            eta: 0.5,
            epochs: 10,
            batch_size: None,
            loss: Loss::SoftmaxCrossEntropy,
            output: PathBuf::from("darknight-out"),
            oracle: false,
        }
    }
}

impl Default for IntegritySection {
    fn default() -> Self {
        IntegritySection { enabled: false, threshold: DEFAULT_THRESHOLD }
    }
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection { c1: 1.0, ratio: 10.0, sigma_sq: None, tolerance: 0.15 }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub noise_mean: Option<f64>,
    pub noise_variance: Option<f64>,
    pub noise_seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub model_seed: Option<u64>,
    pub synthetic: Option<Synthetic>,
    pub samples: Option<usize>,
    pub data_seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub eta: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub loss: Option<Loss>,
    pub output: Option<PathBuf>,
    pub oracle: bool,
    pub integrity: bool,
    pub threshold: Option<f64>,
    pub tamper: Option<String>,
    pub c1: Option<f64>,
    pub ratio: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub tolerance: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Reads `path` if given; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.model.manifest.as_mut() {
            rebase(m);
        }
        cfg.data.inputs.iter_mut().for_each(rebase);
        cfg.data.targets.iter_mut().for_each(rebase);
        rebase(&mut cfg.train.output);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        fn set<T>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        set(&mut self.seed, o.seed);
        set(&mut self.k, o.k);
        set(&mut self.noise.mean, o.noise_mean);
        set(&mut self.noise.variance, o.noise_variance);
        set(&mut self.noise.seed, o.noise_seed);
        if o.model.is_some() {
            self.model.manifest = o.model;
            self.model.layers = None;
        }
        set(&mut self.model.seed, o.model_seed);
        if let Some(s) = o.synthetic {
            self.data.synthetic = s;
            self.data.inputs.clear();
            self.data.targets.clear();
        }
        set(&mut self.data.samples, o.samples);
        set(&mut self.data.seed, o.data_seed);
        if !o.inputs.is_empty() {
            self.data.inputs = o.inputs;
        }
        if !o.targets.is_empty() {
            self.data.targets = o.targets;
        }
        set(&mut self.train.eta, o.eta);
        set(&mut self.train.epochs, o.epochs);
        if o.batch_size.is_some() {
            self.train.batch_size = o.batch_size;
        }
        set(&mut self.train.loss, o.loss);
        set(&mut self.train.output, o.output);
        self.train.oracle |= o.oracle;
        self.integrity.enabled |= o.integrity;
        set(&mut self.integrity.threshold, o.threshold);
        if o.tamper.is_some() {
            self.verify.tamper = o.tamper;
        }
        set(&mut self.bound.c1, o.c1);
        set(&mut self.bound.ratio, o.ratio);
        if o.sigma_sq.is_some() {
            self.bound.sigma_sq = o.sigma_sq;
        }
        set(&mut self.bound.tolerance, o.tolerance);
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Param("k must be >= 1".into()));
        }
        self.noise_spec()?;
        darknight::pipeline::integrity::validate_threshold(self.integrity.threshold)?;
        if self.model.manifest.is_some() && self.model.layers.is_some() {
            return Err(Error::Param("model.manifest and model.layers are mutually exclusive".into()));
        }
        if self.model.hidden == 0 {
            return Err(Error::Param("model.hidden must be >= 1".into()));
        }
        if self.data.inputs.is_empty() && self.data.samples == 0 {
            return Err(Error::Param("data.samples must be >= 1".into()));
        }
        if !self.data.targets.is_empty() && self.data.targets.len() != self.data.inputs.len() {
            return Err(Error::Param(format!(
                "{} input files vs {} target files",
                self.data.inputs.len(),
                self.data.targets.len()
            )));
        }
        if !(self.train.eta > 0.0) || !self.train.eta.is_finite() {
            return Err(Error::Param(format!("train.eta must be > 0, got {}", self.train.eta)));
        }
        if self.train.batch_size == Some(0) {
            return Err(Error::Param("train.batch_size must be >= 1".into()));
        }
        if !(self.bound.tolerance > 0.0) {
            return Err(Error::Param("bound.tolerance must be > 0".into()));
        }
        self.tamper()?;
        Ok(())
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.noise.mean, self.noise.variance, self.noise.seed)
    }

    pub fn tamper(&self) -> Result<Option<TamperPolicy>> {
        self.verify.tamper.as_deref().map(parse_tamper).transpose()
    }
}

/// Parses `layer:equation:epsilon[:entry]`. Without an entry index the
/// whole output is shifted by epsilon.
pub fn parse_tamper(s: &str) -> Result<TamperPolicy> {
    let bad = || Error::Param(format!("malformed tamper spec {s:?}, expected layer:eq:eps[:entry]"));
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let layer = parts[0].trim().parse().map_err(|_| bad())?;
    let equation = parts[1].trim().parse().map_err(|_| bad())?;
    let epsilon: f64 = parts[2].trim().parse().map_err(|_| bad())?;
    if !epsilon.is_finite() {
        return Err(bad());
    }
    let perturbation = match parts.get(3) {
        Some(i) => Perturbation::Entry { index: i.trim().parse().map_err(|_| bad())?, epsilon },
        None => Perturbation::Whole { epsilon },
    };
    Ok(TamperPolicy { layer, equation, perturbation })
}
