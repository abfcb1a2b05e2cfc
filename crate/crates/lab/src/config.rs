//! Experiment configuration.
//!
//! Values come from built-in defaults, then an optional JSON file, then
//! command-line flags. The resolved result is written next to every run's
//! outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spt_core::attack::PerturbationConfig;
use spt_core::data::DatasetName;
use spt_core::model::{ArchitectureId, TrainConfig};
use spt_core::spt::{self, AttackMode, InitScheme, SptTrainConfig};

use crate::error::{LabError, Result};
use crate::idx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
}

impl From<DatasetKind> for DatasetName {
    fn from(k: DatasetKind) -> Self {
        match k {
            DatasetKind::Mnist => DatasetName::Mnist,
            DatasetKind::Fmnist => DatasetName::FashionMnist,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defense {
    None,
    PgdAdvTrain,
}

impl Defense {
    pub fn as_str(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::PgdAdvTrain => "pgd-adv-train",
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Spt,
}

impl AttackKind {
    pub const NAMES: [&'static str; 3] = ["spt", "fgsm", "pgd"];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Spt => "spt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "spt" => Ok(AttackKind::Spt),
            _ => Err(LabError::Config(format!(
                "unknown attack `{s}`; valid attacks are {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSettings {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
}

impl PerturbationSettings {
    fn from_core(c: PerturbationConfig) -> Self {
        Self {
            epsilon: c.epsilon,
            step_size: c.step_size,
            iterations: c.iterations,
            random_start: c.random_start,
        }
    }

    pub fn to_core(&self, seed: u64) -> PerturbationConfig {
        PerturbationConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            iterations: self.iterations,
            random_start: self.random_start,
            seed,
        }
    }
}

impl Default for PerturbationSettings {
    fn default() -> Self {
        Self::from_core(PerturbationConfig::pgd_eval(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTrainSettings {
    pub perturbation: PerturbationSettings,
    /// Epochs of adversarial training (ordinary training uses `train.epochs`).
    pub epochs: usize,
}

impl Default for AdvTrainSettings {
    fn default() -> Self {
        Self {
            perturbation: PerturbationSettings::from_core(PerturbationConfig::pgd_train(0)),
            epochs: TrainConfig::default().epochs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdSettings {
    pub perturbation: PerturbationSettings,
    /// Evaluate PGD cells on only the first `eval_limit` test examples.
    pub eval_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SptSettings {
    pub gammas: Vec<f64>,
    /// Dataset default (0 for MNIST, 0.6 for Fashion-MNIST) when absent.
    pub alpha: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_seed: u64,
    pub init_scheme: String,
    /// `untargeted` or `targeted:<label>`.
    pub mode: String,
}

impl Default for SptSettings {
    fn default() -> Self {
        let d = SptTrainConfig::default();
        Self {
            gammas: spt::DEFAULT_GAMMAS.to_vec(),
            alpha: None,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            init_seed: 0,
            init_scheme: InitScheme::default().to_string(),
            mode: AttackMode::Untargeted.to_string(),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<AttackMode> {
    if s == "untargeted" {
        return Ok(AttackMode::Untargeted);
    }
    s.strip_prefix("targeted:")
        .and_then(|l| l.parse::<u8>().ok())
        .filter(|&l| l < 10)
        .map(AttackMode::Targeted)
        .ok_or_else(|| LabError::Config(format!("bad SPT mode `{s}`; expected untargeted or targeted:<0-9>")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Pgm => "pgm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// First `k` examples of each split.
    pub subset: Option<usize>,
    pub seed: u64,
    pub models: Vec<String>,
    pub train: TrainSettings,
    pub defense: Defense,
    pub adv_train: AdvTrainSettings,
    pub attacks: Vec<AttackKind>,
    pub fgsm_epsilon: f64,
    pub pgd: PgdSettings,
    pub spt: SptSettings,
    pub export_format: ImageFormat,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            subset: None,
            seed: 0,
            models: ArchitectureId::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            train: TrainSettings::default(),
            defense: Defense::None,
            adv_train: AdvTrainSettings::default(),
            attacks: vec![AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Spt],
            fgsm_epsilon: 0.3,
            pgd: PgdSettings::default(),
            spt: SptSettings::default(),
            export_format: ImageFormat::Png,
            out: PathBuf::from("runs/default"),
            jobs: 1,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of any serializable value through its canonical JSON form.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config types serialize"))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(LabError::io(path))?;
        serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))
    }

    pub fn dataset_name(&self) -> DatasetName {
        self.dataset.into()
    }

    pub fn model_ids(&self) -> Result<Vec<ArchitectureId>> {
        self.models
            .iter()
            .map(|m| ArchitectureId::parse(m).map_err(|e| LabError::Config(e.to_string())))
            .collect()
    }

    pub fn alpha(&self) -> f64 {
        self.spt.alpha.unwrap_or(match self.dataset {
            DatasetKind::Mnist => spt::MNIST_ALPHA,
            DatasetKind::Fmnist => spt::FMNIST_ALPHA,
        })
    }

    /// Fills dataset-dependent defaults and checks every field.
    pub fn resolve(mut self) -> Result<Self> {
        self.data_dir = Some(idx::resolve_data_dir(self.data_dir.as_deref(), self.dataset_name()));
        self.spt.alpha = Some(self.alpha());
        self.models = self.model_ids()?.iter().map(|m| m.as_str().to_string()).collect();
        if self.models.is_empty() {
            return Err(LabError::Config("at least one model is required".into()));
        }
        if self.subset == Some(0) || self.pgd.eval_limit == Some(0) {
            return Err(LabError::Config("subset sizes must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(LabError::Config("--jobs must be at least 1".into()));
        }
        if self.train.batch_size == 0 || self.train.learning_rate.is_nan() || self.train.learning_rate <= 0.0 {
            return Err(LabError::Config("training needs a positive batch size and learning rate".into()));
        }
        self.spt_train_config()?.validate()?;
        self.spt_init_scheme()?;
        spt::SptParams::init(&self.spt.gammas, self.alpha(), InitScheme::Zeros, 0)?;
        self.adv_train.perturbation.to_core(0).validate()?;
        self.pgd.perturbation.to_core(0).validate()?;
        PerturbationConfig::fgsm(self.fgsm_epsilon).validate()?;
        Ok(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
        }
    }

    pub fn adv_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.adv_train.epochs,
            ..self.train_config()
        }
    }

    pub fn spt_train_config(&self) -> Result<SptTrainConfig> {
        Ok(SptTrainConfig {
            learning_rate: self.spt.learning_rate,
            epochs: self.spt.epochs,
            batch_size: self.spt.batch_size,
            mode: parse_mode(&self.spt.mode)?,
            shuffle_seed: self.seed,
        })
    }

    pub fn spt_init_scheme(&self) -> Result<InitScheme> {
        InitScheme::parse(&self.spt.init_scheme).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Digest of every field that can change results; output location,
    /// parallelism and data location are excluded.
    pub fn digest(&self) -> String {
        let mut view = self.clone();
        view.out = PathBuf::new();
        view.data_dir = None;
        view.jobs = 1;
        digest_of(&view)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config types serialize");
        s.push('\n');
        s
    }
}
