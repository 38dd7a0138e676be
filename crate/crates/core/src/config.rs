//! Run configuration: one JSON document drives every CLI subcommand.
//!
//! Every section and field is optional; omitted values take the defaults
//! below, unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::par::Execution;
use crate::policy::PolicyConfig;
use crate::scenegen::SceneConfig;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_episodes: usize,
    /// Held-out episodes for evaluation and benchmarking.
    pub heldout_episodes: usize,
    /// Episodes used for the per-epoch policy metrics.
    pub validation_episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_episodes: 240,
            heldout_episodes: 240,
            validation_episodes: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch: 16,
            lr: 2e-3,
            lr_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub episodes: usize,
    /// Frames per optimizer step.
    pub batch: usize,
    pub lr: f32,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 8,
            episodes: 120,
            batch: 16,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub episodes: usize,
    /// Episodes per optimizer step.
    pub batch: usize,
    /// Predictor learning rate.
    pub lr: f32,
    /// Selector learning rate, kept in its own Adam state.
    pub selector_lr: f32,
    /// Weight `λ` of the ratio loss.
    pub lambda: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            episodes: 240,
            batch: 2,
            lr: 5e-3,
            selector_lr: 5e-3,
            lambda: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Cache ratio of the rule-based and forced-ratio conditions.
    pub fixed_ratio: f64,
    pub sweep_ratios: Vec<f64>,
    /// Timed steps per condition (after warmup).
    pub wallclock_steps: usize,
    pub warmup_steps: usize,
    /// Forced ratio of the wall-clock comparison.
    pub wallclock_ratio: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            fixed_ratio: 0.4,
            sweep_ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            wallclock_steps: 120,
            warmup_steps: 10,
            wallclock_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run data-parallel loops on the rayon pool.
    pub parallel: bool,
    /// Output directory for checkpoints, logs, CSVs and plots.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallel: true,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            policy: PolicyConfig::default(),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.policy.validate(self.model.height, self.model.width, self.model.patch)?;
        if (self.scene.height, self.scene.width) != (self.model.height, self.model.width) {
            return Err(Error::config(format!(
                "scene frames are {}×{} but the model expects {}×{}",
                self.scene.height, self.scene.width, self.model.height, self.model.width
            )));
        }
        if self.scene.cells() != self.model.vocab {
            return Err(Error::config(format!(
                "scene has {} cells but the action head has {} classes",
                self.scene.cells(),
                self.model.vocab
            )));
        }
        let b = &self.bench;
        if b.sweep_ratios.iter().chain([&b.fixed_ratio, &b.wallclock_ratio]).any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::config("bench ratios must lie in [0, 1)"));
        }
        if self.pretrain.batch == 0 || self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        let lrs = [self.pretrain.lr, self.stage1.lr, self.stage2.lr, self.stage2.selector_lr];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.stage2.lambda < 0.0 {
            return Err(Error::config("lambda must be non-negative"));
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn adam(lr: f32) -> AdamConfig {
        AdamConfig { lr, ..AdamConfig::default() }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.out_dir.join("backbone.ckpt")
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.out_dir.join("policy_stage1.ckpt")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.out_dir.join("policy.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }
}
