//! TOML run configuration.
//!
//! ```toml
//! [train]
//! method = "prpo"
//! lr = 3.0
//!
//! [fusion]
//! min_gap = 2
//!
//! [suite]
//! splits = ["entropy", "uniform", "random"]
//! ```
//!
//! Every section and key is optional; missing values take the library
//! defaults. Unknown keys are rejected.

use std::path::Path;

use prpo_core::{
    FusionConfig, Method, OracleConfig, Optimizer, SplitStrategy, TaskConfig, TrainConfig,
    WarmStart,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// The `[train]` section: the flat hyperparameters of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    pub seed: u64,
    /// Reference setting: 8.
    pub rollout_n: usize,
    /// Reference setting: 128 prompts per batch.
    pub batch_groups: usize,
    /// Reference setting: 1e-6 for billion-parameter models.
    pub lr: f64,
    /// Reference setting: 0.001.
    pub kl_coeff: f64,
    /// Reference setting: 0.2.
    pub clip_ratio: f64,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub early_stop_patience: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub split: SplitStrategy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            method: d.method,
            seed: d.seed,
            rollout_n: d.rollout_n,
            batch_groups: d.batch_groups,
            lr: d.lr,
            kl_coeff: d.kl_coeff,
            clip_ratio: d.clip_ratio,
            epochs: d.epochs,
            updates_per_epoch: d.updates_per_epoch,
            early_stop_patience: d.early_stop_patience,
            max_len: d.max_len,
            temperature: d.temperature,
            split: d.split,
        }
    }
}

/// Held-out greedy evaluation after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tasks: 500, seed: 0 }
    }
}

/// Ablation suite: one training run per split strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub splits: Vec<SplitStrategy>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub optimizer: Optimizer,
    pub fusion: FusionConfig,
    pub oracle: OracleConfig,
    pub task: TaskConfig,
    pub warm_start: WarmStart,
    pub eval: EvalSection,
    pub suite: Option<SuiteSection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Reads `path` when given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            seed: t.seed,
            rollout_n: t.rollout_n,
            batch_groups: t.batch_groups,
            lr: t.lr,
            kl_coeff: t.kl_coeff,
            clip_ratio: t.clip_ratio,
            epochs: t.epochs,
            updates_per_epoch: t.updates_per_epoch,
            early_stop_patience: t.early_stop_patience,
            max_len: t.max_len,
            temperature: t.temperature,
            split: t.split,
            optimizer: self.optimizer,
            fusion: self.fusion.clone(),
            oracle: self.oracle.clone(),
            task: self.task.clone(),
            warm_start: self.warm_start.clone(),
        }
    }

    /// Validates the assembled training configuration.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(suite) = &self.suite {
            if suite.splits.is_empty() {
                return Err(CliError::Config("suite.splits is empty".into()));
            }
        }
        if self.eval.tasks == 0 {
            return Err(CliError::Config("eval.tasks must be >= 1".into()));
        }
        Ok(())
    }
}
