//! Experiment configuration: one JSON document, flags layered on top.

use std::path::{Path, PathBuf};

use btrans::bayes::{NoiseMode, NoisePrior, SiteSelector};
use btrans::generate::DecodeConfig;
use btrans::lora::LoraConfig;
use btrans::model::ModelConfig;
use btrans::rl::TrainConfig;
use btrans::sft::PretrainConfig;
use btrans::tasks::{TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

/// Bumped whenever the run-directory layout or a record schema changes.
pub const FORMAT_VERSION: u32 = 1;

/// Where the base model comes from: a checkpoint, or a fresh init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Architecture used when no checkpoint is given.
    #[serde(default)]
    pub config: ModelConfig,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelSource {
    fn default() -> Self {
        Self { checkpoint: None, config: ModelConfig::default(), init_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    #[serde(default)]
    pub mu: f64,
    pub sigma: f64,
    #[serde(default = "default_mode")]
    pub mode: NoiseMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target: SiteSelector,
}

fn default_mode() -> NoiseMode {
    NoiseMode::Sequence
}

impl Default for NoiseBlock {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 0.02, mode: NoiseMode::Sequence, seed: 0, target: SiteSelector::All }
    }
}

impl NoiseBlock {
    pub fn prior(&self) -> btrans::Result<NoisePrior> {
        NoisePrior::new(self.mu, self.sigma)
    }
}

/// Rollout and optimization settings; noise and seed come from the noise block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    pub clip_ratio: f64,
    pub kl_coef: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub lora: LoraConfig,
    pub reward_threshold: f64,
    pub threshold_window: usize,
    pub eval_prompts: Option<usize>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            group_size: t.group_size,
            batch_prompts: t.batch_prompts,
            lr: t.lr,
            clip_ratio: t.clip_ratio,
            kl_coef: t.kl_coef,
            steps: t.steps,
            eval_interval: t.eval_interval,
            temperature: t.temperature,
            max_new_tokens: t.max_new_tokens,
            lora: t.lora,
            reward_threshold: t.reward_threshold,
            threshold_window: t.threshold_window,
            eval_prompts: t.eval_prompts,
        }
    }
}

/// Population and report settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationBlock {
    /// Members per prompt.
    pub k: usize,
    /// σ values to sweep; empty means just the noise block's σ.
    pub sigmas: Vec<f64>,
    /// Use at most this many prompts.
    pub limit: Option<usize>,
}

impl Default for PopulationBlock {
    fn default() -> Self {
        Self { k: 8, sigmas: Vec::new(), limit: None }
    }
}

fn default_decode() -> DecodeConfig {
    DecodeConfig { temperature: 1.0, max_new_tokens: 48, ..Default::default() }
}

fn default_task() -> TaskSpec {
    TaskSpec { kind: TaskKind::MultiDigitAdd { max_digits: 4 }, ..Default::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub noise: NoiseBlock,
    #[serde(default = "default_decode")]
    pub decode: DecodeConfig,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub population: PopulationBlock,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            noise: NoiseBlock::default(),
            decode: default_decode(),
            task: default_task(),
            pretrain: PretrainConfig::default(),
            train: TrainBlock::default(),
            population: PopulationBlock::default(),
            output_dir: None,
        }
    }
}

/// What a run directory records about how it was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| crate::CliError::input(format!("bad config {}: {e}", path.display())).into())
    }

    /// Checks every block; errors are config errors.
    pub fn validate(&self) -> btrans::Result<()> {
        self.model.config.validate()?;
        self.noise.prior()?;
        self.noise.target.resolve(&self.model.config)?;
        self.decode.validate()?;
        self.task.validate()?;
        if self.population.k == 0 {
            return Err(btrans::Error::Config("population.k must be at least 1".into()));
        }
        for &s in &self.population.sigmas {
            NoisePrior::new(self.noise.mu, s)?;
        }
        self.train_config().validate()
    }

    /// Core training config with noise and seed taken from the noise block.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            group_size: t.group_size,
            batch_prompts: t.batch_prompts,
            lr: t.lr,
            clip_ratio: t.clip_ratio,
            kl_coef: t.kl_coef,
            steps: t.steps,
            sigma: self.noise.sigma,
            mu: self.noise.mu,
            target: self.noise.target.clone(),
            eval_interval: t.eval_interval,
            temperature: t.temperature,
            max_new_tokens: t.max_new_tokens,
            seed: self.noise.seed,
            lora: t.lora.clone(),
            reward_threshold: t.reward_threshold,
            threshold_window: t.threshold_window,
            eval_prompts: t.eval_prompts,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"noize": {"sigma": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"noise": {"sigma": 0.1, "extra": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"sigma": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"task": {"kind": "mod_add", "modulus": 7, "modulo": 7}}"#).is_err());
        let t = ExperimentConfig::from_json(r#"{"task": {"kind": "mod_add", "modulus": 7, "n_eval": 5}}"#).unwrap();
        assert_eq!(t.task.n_eval, 5);
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = ExperimentConfig::default();
        c.noise.sigma = 0.05;
        c.noise.mode = NoiseMode::Token;
        c.task = TaskSpec { kind: TaskKind::ListMax { max_len: 4, max_value: 50 }, ..Default::default() };
        c.population.sigmas = vec![0.0, 0.01];
        c.output_dir = Some("runs/a".into());
        assert_eq!(ExperimentConfig::from_json(&c.to_pretty_json()).unwrap(), c);
    }

    #[test]
    fn train_config_takes_noise_block() {
        let mut c = ExperimentConfig::default();
        c.noise.sigma = 0.07;
        c.noise.seed = 9;
        let t = c.train_config();
        assert_eq!((t.sigma, t.seed), (0.07, 9));
    }

    #[test]
    fn validation_flags_bad_values() {
        let mut c = ExperimentConfig::default();
        c.noise.sigma = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.group_size = 1;
        assert!(c.validate().is_err());
    }
}
