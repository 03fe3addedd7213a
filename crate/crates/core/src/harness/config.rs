//! Typed experiment configuration (TOML) and its validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::SpsaConfig;
use crate::error::{Error, Result};
use crate::nn::LrSchedule;
use crate::train::{EarlyStop, StopMetric};

/// Which mapper training procedure a config section refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MapperKind {
    Stack,
    Auto,
    Ce,
    Luring,
}

impl MapperKind {
    pub const ALL: [MapperKind; 4] = [
        MapperKind::Stack,
        MapperKind::Auto,
        MapperKind::Ce,
        MapperKind::Luring,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MapperKind::Stack => "stack",
            MapperKind::Auto => "auto",
            MapperKind::Ce => "ce",
            MapperKind::Luring => "luring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stack" => Ok(MapperKind::Stack),
            "auto" => Ok(MapperKind::Auto),
            "ce" | "c_e" => Ok(MapperKind::Ce),
            "luring" => Ok(MapperKind::Luring),
            other => Err(Error::Config(format!("unknown mapper variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    /// Use only the first N training examples; 0 means all.
    #[serde(default)]
    pub train_subset: usize,
    /// Evaluation examples drawn from the test set for the protocols.
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    /// Test examples used by the per-epoch training evaluation hook.
    #[serde(default = "default_epoch_eval")]
    pub epoch_eval_examples: usize,
}

fn default_eval_examples() -> usize {
    1000
}

fn default_epoch_eval() -> usize {
    2000
}

/// Early-stopping rule in config form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopSpec {
    /// `accuracy` or `agreement`.
    pub metric: String,
    pub at_least: f64,
    #[serde(default)]
    pub min_epochs: usize,
}

impl EarlyStopSpec {
    pub fn to_early_stop(&self) -> Result<EarlyStop> {
        let metric = match self.metric.as_str() {
            "accuracy" => StopMetric::Accuracy,
            "agreement" => StopMetric::Agreement,
            other => {
                return Err(Error::Config(format!(
                    "unknown early-stop metric `{other}`"
                )))
            }
        };
        Ok(EarlyStop {
            metric,
            at_least: self.at_least,
            min_epochs: self.min_epochs,
        })
    }
}

/// One training section (base model or one mapper variant).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    /// Piecewise learning rate as `[[from_epoch, lr], ...]`.
    pub lr: Vec<(usize, f64)>,
    /// Luring coefficient; only read by the luring variant.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub early_stop: Option<EarlyStopSpec>,
}

impl TrainSpec {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule(self.lr.clone())
    }
}

/// One attack family over a list of ε values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// fgsm | pgd | mim | mim_l2 | dim | mim_ti | dim_ti | spsa
    pub kind: String,
    pub epsilons: Vec<f32>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub l2_bound: Option<f32>,
    #[serde(default = "default_diversity_p")]
    pub diversity_p: f64,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    #[serde(default)]
    pub spsa: Option<SpsaConfig>,
}

fn default_steps() -> usize {
    1000
}
fn default_step_size() -> f32 {
    0.01
}
fn default_momentum() -> f32 {
    1.0
}
fn default_diversity_p() -> f64 {
    1.0
}
fn default_kernel() -> usize {
    1
}
fn default_random_start() -> bool {
    true
}

pub const ATTACK_KINDS: [&str; 8] = [
    "fgsm", "pgd", "mim", "mim_l2", "dim", "mim_ti", "dim_ti", "spsa",
];

/// Configuration of the worst-case MIM-W grid selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimWSpec {
    pub epsilons: Vec<f32>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f32,
    #[serde(default = "default_diversity_p")]
    pub diversity_p: f64,
    #[serde(default = "default_mimw_kernels")]
    pub kernels: Vec<usize>,
}

fn default_mimw_kernels() -> Vec<usize> {
    vec![3, 5, 10, 15]
}

/// Root experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Output directory for checkpoints, logs, reports and the manifest.
    pub out: PathBuf,
    /// Architecture id of the target model (`mnist_cnn`).
    #[serde(default = "default_base_arch")]
    pub base_arch: String,
    /// Architecture id of the mapper (`mnist_mapper`).
    #[serde(default = "default_mapper_arch")]
    pub mapper_arch: String,
    pub base: TrainSpec,
    /// Keys: `stack`, `auto`, `ce`, `luring`.
    pub mappers: BTreeMap<String, TrainSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub mim_w: Option<MimWSpec>,
    /// Persist adversarial batches as container files.
    #[serde(default)]
    pub persist_adversarial: bool,
}

fn default_base_arch() -> String {
    "mnist_cnn".into()
}

fn default_mapper_arch() -> String {
    "mnist_mapper".into()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.name != "mnist" {
            return Err(Error::Config(format!(
                "unknown dataset `{}` (supported: mnist)",
                self.dataset.name
            )));
        }
        if self.base_arch != "mnist_cnn" {
            return Err(Error::Config(format!(
                "unknown base architecture `{}`",
                self.base_arch
            )));
        }
        if self.mapper_arch != "mnist_mapper" {
            return Err(Error::Config(format!(
                "unknown mapper architecture `{}`",
                self.mapper_arch
            )));
        }
        for key in self.mappers.keys() {
            MapperKind::parse(key)?;
        }
        for kind in MapperKind::ALL {
            if !self.mappers.contains_key(kind.as_str()) {
                return Err(Error::Config(format!(
                    "missing training section for mapper `{}`",
                    kind.as_str()
                )));
            }
        }
        for a in &self.attacks {
            if !ATTACK_KINDS.contains(&a.kind.as_str()) {
                return Err(Error::Config(format!("unknown attack kind `{}`", a.kind)));
            }
            for &e in &a.epsilons {
                if !(e > 0.0 && e < 1.0) {
                    return Err(Error::Config(format!(
                        "epsilon must be in (0,1), got {e}"
                    )));
                }
            }
        }
        if let Some(mw) = &self.mim_w {
            for &e in &mw.epsilons {
                if !(e > 0.0 && e < 1.0) {
                    return Err(Error::Config(format!(
                        "epsilon must be in (0,1), got {e}"
                    )));
                }
            }
            if mw.kernels.is_empty() {
                return Err(Error::Config("mim_w.kernels must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn train_spec(&self, kind: MapperKind) -> &TrainSpec {
        &self.mappers[kind.as_str()]
    }

    /// Canonical serialized form used for hashing and archival.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// The full-scale MNIST setup.
    pub fn mnist_default(data_path: PathBuf, out: PathBuf) -> Self {
        let sched_64 = vec![(0, 1e-3), (45, 2e-4), (58, 4e-4)];
        let mut mappers = BTreeMap::new();
        mappers.insert(
            "stack".to_string(),
            TrainSpec {
                epochs: 5,
                batch_size: 28,
                lr: vec![(0, 1e-3)],
                lambda: None,
                early_stop: None,
            },
        );
        mappers.insert(
            "auto".to_string(),
            TrainSpec {
                epochs: 50,
                batch_size: 128,
                lr: vec![(0, 1e-3)],
                lambda: None,
                early_stop: None,
            },
        );
        mappers.insert(
            "ce".to_string(),
            TrainSpec {
                epochs: 64,
                batch_size: 64,
                lr: sched_64.clone(),
                lambda: None,
                early_stop: None,
            },
        );
        mappers.insert(
            "luring".to_string(),
            TrainSpec {
                epochs: 64,
                batch_size: 64,
                lr: sched_64,
                lambda: Some(1.0),
                early_stop: None,
            },
        );
        ExperimentConfig {
            seed: 1,
            dataset: DatasetSpec {
                name: "mnist".into(),
                path: data_path,
                train_subset: 0,
                eval_examples: 1000,
                epoch_eval_examples: 2000,
            },
            out,
            base_arch: default_base_arch(),
            mapper_arch: default_mapper_arch(),
            base: TrainSpec {
                epochs: 5,
                batch_size: 28,
                lr: vec![(0, 1e-2)],
                lambda: None,
                early_stop: None,
            },
            mappers,
            attacks: vec![AttackSpec {
                kind: "mim".into(),
                epsilons: vec![0.2, 0.3, 0.4],
                steps: 1000,
                step_size: 0.01,
                momentum: 1.0,
                l2_bound: None,
                diversity_p: 1.0,
                kernel: 1,
                random_start: true,
                spsa: None,
            }],
            mim_w: Some(MimWSpec {
                epsilons: vec![0.3],
                steps: 1000,
                step_size: 0.01,
                diversity_p: 1.0,
                kernels: default_mimw_kernels(),
            }),
            persist_adversarial: false,
        }
    }
}
