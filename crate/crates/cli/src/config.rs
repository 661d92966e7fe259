use std::fs;
use std::path::{Path, PathBuf};

use patchlab::attack::{AttackConfig, PerturbationNorm, DEFAULT_TEMPERATURE};
use patchlab::detector::{DetectorArch, TrainHyper};
use patchlab::difftrans::PoseDistribution;
use patchlab::eval::{DriveBy, PoseGrid};
use patchlab::scenegen::SignClass;
use patchlab::seed::{derive, sha256_hex};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_holdout: usize,
    pub background_pool: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_holdout: 300,
            background_pool: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub a: DetectorArch,
    pub b: DetectorArch,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            a: DetectorArch::reference_a(),
            b: DetectorArch::reference_b(),
        }
    }
}

/// Training hyperparameters; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 0.002,
            epochs: 30,
            batch: 16,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub a: TrainSettings,
    pub b: TrainSettings,
}

/// Attack settings shared by every mode and mask; seeds come from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub steps: usize,
    pub step_size: f64,
    pub batch_transforms: usize,
    pub background_pool: usize,
    pub lambda_reg: f64,
    pub temperature: f64,
    pub early_stop: Option<f64>,
    pub normalize_gradient: bool,
    pub norm: PerturbationNorm,
    pub victim_class: SignClass,
    pub target_class: SignClass,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 400,
            step_size: 0.02,
            batch_transforms: 16,
            background_pool: 8,
            lambda_reg: 0.01,
            temperature: DEFAULT_TEMPERATURE,
            early_stop: Some(1.0),
            normalize_gradient: true,
            norm: PerturbationNorm::L2,
            victim_class: SignClass::Stop,
            target_class: SignClass::SpeedLimit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub grid: PoseGrid,
    pub driveby: DriveBy,
    /// Frames per contact sheet; 0 disables sheets.
    pub contact_sheet_frames: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            grid: PoseGrid::default(),
            driveby: DriveBy::default(),
            contact_sheet_frames: 24,
        }
    }
}

/// Everything an experiment depends on. All randomness derives from `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub pose_distribution: PoseDistribution,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 7,
            output_dir: PathBuf::from("../runs"),
            dataset: DatasetSection::default(),
            arch: ArchSection::default(),
            training: TrainingSection::default(),
            pose_distribution: PoseDistribution::default(),
            attack: AttackSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Which trained detector a command refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ArchChoice {
    A,
    B,
}

impl ArchChoice {
    pub fn label(self) -> &'static str {
        match self {
            ArchChoice::A => "a",
            ArchChoice::B => "b",
        }
    }
}

/// How the sign's position is treated while optimizing a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Translation {
    /// Sampled over all in-bounds positions.
    Sampled,
    /// Pinned to the scene center.
    Pinned,
}

fn bad(section: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{section}: {msg}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        let d = &self.dataset;
        if d.n_train == 0 {
            return Err(bad("dataset.n_train", "must be > 0"));
        }
        if d.n_holdout == 0 {
            return Err(bad("dataset.n_holdout", "must be > 0"));
        }
        if d.background_pool == 0 {
            return Err(bad("dataset.background_pool", "must be > 0"));
        }
        for (name, arch) in [("arch.a", &self.arch.a), ("arch.b", &self.arch.b)] {
            arch.validate().map_err(|e| bad(name, e))?;
        }
        for (name, arch) in [("training.a", ArchChoice::A), ("training.b", ArchChoice::B)] {
            self.train_hyper(arch).validate().map_err(|e| bad(name, e))?;
        }
        self.pose_distribution.validate().map_err(|e| bad("pose_distribution", e))?;
        let a = &self.attack;
        if a.steps == 0 {
            return Err(bad("attack.steps", "must be > 0"));
        }
        if a.victim_class == a.target_class {
            return Err(bad("attack.target_class", "must differ from attack.victim_class"));
        }
        if !(a.lambda_reg >= 0.0 && a.lambda_reg.is_finite()) {
            return Err(bad("attack.lambda_reg", "must be a finite value >= 0"));
        }
        if let PerturbationNorm::Linf { radius } = a.norm {
            if !(radius > 0.0) {
                return Err(bad("attack.norm.radius", "must be > 0"));
            }
        }
        self.attack_config("check", Translation::Sampled)
            .validate()
            .map_err(|e| bad("attack", e))?;
        self.evaluation.grid.validate().map_err(|e| bad("evaluation.grid", e))?;
        self.evaluation.driveby.validate().map_err(|e| bad("evaluation.driveby", e))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the config. The output location
    /// is left out so a moved run keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn dataset_seed(&self, split: &str) -> u64 {
        derive(self.master_seed, &format!("dataset/{split}"))
    }

    pub fn texture_seed(&self) -> u64 {
        derive(self.master_seed, "victim-texture")
    }

    pub fn eval_seed(&self) -> u64 {
        derive(self.master_seed, "evaluation")
    }

    pub fn arch(&self, which: ArchChoice) -> &DetectorArch {
        match which {
            ArchChoice::A => &self.arch.a,
            ArchChoice::B => &self.arch.b,
        }
    }

    pub fn train_hyper(&self, which: ArchChoice) -> TrainHyper {
        let s = match which {
            ArchChoice::A => &self.training.a,
            ArchChoice::B => &self.training.b,
        };
        TrainHyper {
            lr: s.lr,
            epochs: s.epochs,
            batch: s.batch,
            seed: derive(self.master_seed, &format!("training/{}", which.label())),
            momentum: s.momentum,
        }
    }

    /// Optimizer settings for one named attack run.
    pub fn attack_config(&self, run_name: &str, translation: Translation) -> AttackConfig {
        let a = &self.attack;
        let mut pose_distribution = self.pose_distribution.clone();
        pose_distribution.translation_invariance = translation == Translation::Sampled;
        AttackConfig {
            steps: a.steps,
            step_size: a.step_size,
            batch_transforms: a.batch_transforms,
            pose_distribution,
            background_pool: a.background_pool,
            seed: derive(self.master_seed, &format!("attack/{run_name}")),
            early_stop: a.early_stop,
            temperature: a.temperature,
            fixed_batch: false,
            normalize_gradient: a.normalize_gradient,
        }
    }
}

/// A parsed, validated config with its hash and run directory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub run_dir: PathBuf,
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig, base_dir: &Path) -> CliResult<Self> {
        config.validate()?;
        let hash = config.hash();
        let out = if config.output_dir.is_absolute() {
            config.output_dir.clone()
        } else {
            base_dir.join(&config.output_dir)
        };
        let run_dir = out.join(format!("run-{}", &hash[..16]));
        Ok(Self { config, hash, run_dir })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing {
                path: path.to_path_buf(),
                what: "config file".into(),
            },
            _ => CliError::io(path, e),
        })?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_config(config, base)
    }

    pub fn dataset_dir(&self, split: &str) -> PathBuf {
        self.run_dir.join("dataset").join(split)
    }

    pub fn weights_path(&self, which: ArchChoice) -> PathBuf {
        self.run_dir.join("weights").join(format!("detector-{}.bin", which.label()))
    }

    pub fn training_log_path(&self, which: ArchChoice) -> PathBuf {
        self.run_dir.join("weights").join(format!("detector-{}.json", which.label()))
    }

    pub fn patch_dir(&self, name: &str) -> PathBuf {
        self.run_dir.join("patches").join(name)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }
}
