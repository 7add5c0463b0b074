//! Command-line flags. Every flag that mirrors a config field wins over it.

use std::path::PathBuf;

use btrans::bayes::NoiseMode;
use btrans::rl::TrainMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "btrans", version, about = "Populations of model instances from one transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Supervised pretraining of a base checkpoint on the task format.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// One persona, one generation.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
    },
    /// K personas per prompt: JSONL records, diversity and PCA tables.
    Population {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prompts: PromptArgs,
        /// Comma-separated σ sweep.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Off vs sequence vs token noise at matched σ and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        prompts: PromptArgs,
    },
    /// GRPO with verifiable rewards, or majority-vote TTRL.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "rlvr")]
        algo: ModeArg,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Noise-cache bytes against a per-instance mask cache.
    MemoryReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value = "model")]
        preset: Preset,
    },
    /// Greedy pass@1 and population metrics on the held-out task set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Members per prompt.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Rlvr,
    Ttrl,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rlvr => TrainMode::Rlvr,
            ModeArg::Ttrl => TrainMode::Ttrl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The configured model architecture.
    Model,
    /// A 7B-class hypothetical shape.
    #[value(name = "7b")]
    SevenB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeFlag {
    Off,
    Sequence,
    Token,
}

impl From<ModeFlag> for NoiseMode {
    fn from(m: ModeFlag) -> Self {
        match m {
            ModeFlag::Off => NoiseMode::Off,
            ModeFlag::Sequence => NoiseMode::Sequence,
            ModeFlag::Token => NoiseMode::Token,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct PromptArgs {
    /// One prompt per line, optionally `prompt<TAB>answer`. Defaults to the
    /// task's held-out set.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Members per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trained adapter sidecar.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeFlag>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub decode_seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Prompt-level worker threads (capped by BTRANS_THREADS).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl Common {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.checkpoint {
            c.model.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.out {
            c.output_dir = Some(p.clone());
        }
        if let Some(v) = self.sigma {
            c.noise.sigma = v;
        }
        if let Some(v) = self.mu {
            c.noise.mu = v;
        }
        if let Some(m) = self.mode {
            c.noise.mode = m.into();
        }
        if let Some(v) = self.noise_seed {
            c.noise.seed = v;
        }
        if let Some(v) = self.decode_seed {
            c.decode.seed = v;
        }
        if let Some(v) = self.temperature {
            c.decode.temperature = v;
        }
        if let Some(v) = self.top_k {
            c.decode.top_k = v;
        }
        if let Some(v) = self.max_new_tokens {
            c.decode.max_new_tokens = v;
        }
        Ok(c)
    }

    /// `--jobs`, capped by `BTRANS_THREADS` when set.
    pub fn threads(&self) -> usize {
        let cap = std::env::var("BTRANS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
        let jobs = self.jobs.max(1);
        cap.map_or(jobs, |c| jobs.min(c))
    }
}

impl PromptArgs {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(k) = self.k {
            c.population.k = k;
        }
        if let Some(l) = self.limit {
            c.population.limit = Some(l);
        }
    }
}
