//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use hesslens::attacks::{AttackKind, AttackSpec, CgParams, Scale};
use hesslens::data::{load_idx, synth_blobs_split, BlobSpec, Dataset};
use hesslens::nn::{Model, ModelConfig};
use hesslens::spectrum::PowerIterParams;
use hesslens::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; every file a command writes goes below it.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelChoice,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        match self {
            ModelChoice::Preset(name) => ModelConfig::preset(name)
                .ok_or_else(|| CliError::Config(format!("unknown model preset `{name}` (m1-desk, c1-desk)"))),
            ModelChoice::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs shaped like the model input.
    Synthetic {
        #[serde(default = "defaults::n_per_class")]
        n_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::noise")]
        noise: f64,
        #[serde(default = "defaults::data_seed")]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        /// Keep a seeded random subset of the training set.
        subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
}

mod defaults {
    pub fn n_per_class() -> usize {
        500
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn separation() -> f64 {
        2.0
    }
    pub fn noise() -> f64 {
        0.5
    }
    pub fn data_seed() -> u64 {
        7
    }
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl DataConfig {
    pub fn load(&self, model: &ModelConfig) -> Result<Datasets, CliError> {
        match self {
            DataConfig::Synthetic {
                n_per_class,
                test_per_class,
                separation,
                noise,
                seed,
            } => {
                let spec = BlobSpec {
                    n_per_class: *n_per_class,
                    classes: model.classes,
                    shape: model.input,
                    separation: *separation,
                    noise: *noise,
                    seed: *seed,
                };
                let train = synth_blobs_split(&spec, 0)?;
                let test = if *test_per_class > 0 {
                    Some(synth_blobs_split(
                        &BlobSpec {
                            n_per_class: *test_per_class,
                            ..spec
                        },
                        1,
                    )?)
                } else {
                    None
                };
                Ok(Datasets { train, test })
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                subset,
                subset_seed,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(n) = subset {
                    train = train.subset(*n, *subset_seed)?;
                }
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    (None, None) => None,
                    _ => {
                        return Err(CliError::Config(
                            "data: test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                for d in std::iter::once(&train).chain(&test) {
                    if d.sample_shape() != model.input || d.classes > model.classes {
                        return Err(CliError::Config(format!(
                            "data: samples of shape {:?} with {} classes do not fit model input {:?} with {} classes",
                            d.sample_shape(),
                            d.classes,
                            model.input,
                            model.classes
                        )));
                    }
                }
                Ok(Datasets { train, test })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Only checked when set; see `PowerIterParams`.
    pub residual_factor: Option<f64>,
    /// Subsample sizes; 0 stands for the whole training set.
    pub b_h: Vec<usize>,
    /// Test samples used for per-sample λ₁ˣ and ‖∇ₓJ‖ statistics.
    pub input_samples: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        let p = PowerIterParams::default();
        SpectrumSection {
            k: p.k,
            tol: p.tol,
            max_iter: p.max_iter,
            residual_factor: None,
            b_h: vec![320],
            input_samples: 0,
            checkpoint: None,
        }
    }
}

impl SpectrumSection {
    pub fn params(&self) -> PowerIterParams {
        PowerIterParams {
            k: self.k,
            tol: self.tol,
            max_iter: self.max_iter,
            residual_factor: self.residual_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    pub kind: AttackKind,
    /// Defaults to the scale preset for the attack's norm.
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub cg: Option<CgParams>,
}

impl AttackEntry {
    pub fn spec(&self, scale: Scale) -> AttackSpec {
        let mut s = AttackSpec::preset(self.kind, scale);
        if let Some(e) = self.epsilon {
            s.epsilon = e;
        }
        if let Some(i) = self.iterations {
            s.iterations = i;
        }
        if let Some(cg) = self.cg {
            s.cg = cg;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub scale: Scale,
    pub attacks: Vec<AttackEntry>,
    /// Model whose gradients generate the perturbations.
    pub checkpoint: Option<PathBuf>,
    /// Models evaluated on the perturbed data (default: the source model).
    pub targets: Vec<PathBuf>,
    /// Write every adversarial dataset to disk.
    pub export: bool,
    /// Attack only a seeded subset of the test set.
    pub samples: Option<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            scale: Scale::Mnist,
            attacks: AttackKind::ALL
                .into_iter()
                .map(|kind| AttackEntry {
                    kind,
                    epsilon: None,
                    iterations: None,
                    cg: None,
                })
                .collect(),
            checkpoint: None,
            targets: Vec::new(),
            export: false,
            samples: None,
        }
    }
}

impl AttackSection {
    pub fn specs(&self) -> Vec<AttackSpec> {
        self.attacks.iter().map(|a| a.spec(self.scale)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    pub mode: LandscapeMode,
    pub checkpoint: Option<PathBuf>,
    /// Second endpoint for interpolation.
    pub other: Option<PathBuf>,
    /// Eigenvector sidecar written by the spectrum command.
    pub directions: Option<PathBuf>,
    pub grid: Option<Vec<f64>>,
    pub grid2: Option<Vec<f64>>,
    /// Size of an extra fixed training batch evaluated at every point.
    pub batch: Option<usize>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        LandscapeSection {
            mode: LandscapeMode::OneD,
            checkpoint: None,
            other: None,
            directions: None,
            grid: None,
            grid2: None,
            batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub batch_sizes: Vec<usize>,
    /// Seeds per batch size; empty means the top-level seed only.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            batch_sizes: vec![16, 64, 256, 1024],
            seeds: Vec::new(),
        }
    }
}

/// The command a configuration is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Spectrum,
    Attack,
    Landscape,
    Sweep,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<ModelConfig, CliError> {
        let mc = self.model.resolve()?;
        Model::new(mc.clone()).map_err(|e| CliError::Config(format!("model: {e}")))?;
        let s = &self.spectrum;
        if s.k == 0 || !(s.tol > 0.0) || s.max_iter == 0 {
            return Err(CliError::Config("spectrum: k, tol and max_iter must be positive".into()));
        }
        if s.b_h.is_empty() {
            return Err(CliError::Config("spectrum: b_h needs at least one entry".into()));
        }
        for a in self.attack.specs() {
            a.validate().map_err(|e| CliError::Config(format!("attack {}: {e}", a.kind.name())))?;
        }
        if let Some(r) = &self.train.robust {
            r.effective_attack()
                .and_then(|a| a.validate())
                .map_err(|e| CliError::Config(format!("train.robust: {e}")))?;
        }
        if self.sweep.batch_sizes.is_empty() {
            return Err(CliError::Config("sweep: batch_sizes needs at least one entry".into()));
        }
        for g in [&self.landscape.grid, &self.landscape.grid2].into_iter().flatten() {
            if g.is_empty() || g.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Config("landscape: grids must be nonempty and finite".into()));
            }
        }
        Ok(mc)
    }

    /// Checks that need the training-set size, for the sections `stage` uses.
    pub fn validate_with_data(&self, n: usize, stage: Stage) -> Result<(), CliError> {
        if matches!(stage, Stage::Train) {
            self.train
                .validate(n)
                .map_err(|e| CliError::Config(format!("train: {e}")))?;
        }
        if matches!(stage, Stage::Spectrum) {
            for &b in &self.spectrum.b_h {
                if b > n {
                    return Err(CliError::Config(format!("spectrum: b_h {b} exceeds {n} training samples")));
                }
            }
        }
        if matches!(stage, Stage::Sweep) {
            for &b in &self.sweep.batch_sizes {
                let mut t = self.train.clone();
                t.batch_size = b;
                t.validate(n)
                    .map_err(|e| CliError::Config(format!("sweep: batch size {b}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration without the output directory, so
    /// the same experiment written elsewhere carries the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hesslens::data::sha256_hex(&json)
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint.bin")
    }
}
