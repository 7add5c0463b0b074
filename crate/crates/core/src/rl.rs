//! Group-relative policy optimization over low-rank adapters.
//!
//! Rollouts run the wrapped model in sequence mode, one persona per group
//! member. The update recomputes log-probabilities with noise off (the mean
//! shift), so only the adapter sees gradients and no randomness is consumed.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bayes::{apply_bayesian_transform, NoiseMode, NoisePrior, SiteSelector, WrappedModel};
use crate::checkpoint::{load_adapter, save_adapter, AdapterState};
use crate::error::{Error, Result};
use crate::generate::{generate, DecodeConfig};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::metrics::{pairwise_cosine_diversity, scs, segment_steps, Encoder};
use crate::model::{forward, ModelParams, ModelRef, NoHooks, Trainable};
use crate::optim::{Adam, AdamConfig};
use crate::population::{majority_vote, member_seed, sample_population, Schedule};
use crate::rng::{derive_seed, stream};
use crate::tasks::{verifiable_reward, Instance, TaskSpec};
use crate::tokenizer::{self, PAD};

/// Standard-deviation guard in the advantage denominator.
pub const ADV_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Verifiable exact-match rewards against ground truth.
    Rlvr,
    /// Majority-vote pseudo-rewards on unlabeled prompts.
    Ttrl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    pub clip_ratio: f64,
    #[serde(default)]
    pub kl_coef: f64,
    pub steps: usize,
    pub sigma: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_target")]
    pub target: SiteSelector,
    pub eval_interval: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lora: LoraConfig,
    /// Trailing-mean rollout reward that counts as "reached".
    pub reward_threshold: f64,
    /// Window of the trailing mean used for the threshold.
    #[serde(default = "default_window")]
    pub threshold_window: usize,
    /// Evaluate on at most this many held-out prompts.
    #[serde(default)]
    pub eval_prompts: Option<usize>,
}

fn default_target() -> SiteSelector {
    SiteSelector::All
}

fn default_window() -> usize {
    5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            batch_prompts: 8,
            lr: 3e-3,
            clip_ratio: 0.2,
            kl_coef: 0.0,
            steps: 200,
            sigma: 0.02,
            mu: 0.0,
            target: SiteSelector::All,
            eval_interval: 5,
            temperature: 1.0,
            max_new_tokens: 48,
            seed: 0,
            lora: LoraConfig::default(),
            reward_threshold: 0.4,
            threshold_window: default_window(),
            eval_prompts: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.batch_prompts == 0 || self.eval_interval == 0 || self.threshold_window == 0 {
            return Err(Error::Config("batch_prompts, eval_interval and threshold_window must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("rollout temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.clip_ratio) || self.kl_coef < 0.0 || !(self.lr > 0.0) {
            return Err(Error::Config("need 0 ≤ clip_ratio < 1, kl_coef ≥ 0, lr > 0".into()));
        }
        NoisePrior::new(self.mu, self.sigma)?;
        Ok(())
    }

    fn decode(&self) -> DecodeConfig {
        DecodeConfig { temperature: self.temperature, top_k: 0, max_new_tokens: self.max_new_tokens, ..Default::default() }
    }
}

/// One rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Per-token log-probabilities under the rollout policy.
    pub logprobs: Vec<f64>,
    pub noise_seed: u64,
    pub decode_seed: u64,
    pub reward: f64,
    pub group: usize,
    pub text: String,
    pub answer: Option<String>,
    /// Generation failed; the trajectory carries zero reward and no tokens.
    pub failed: bool,
}

/// Samples `noise_seeds.len()` trajectories, one persona each.
pub fn rollout_group(
    wrapped: &mut WrappedModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    prompt: &[u32],
    decode: &DecodeConfig,
    noise_seeds: &[u64],
    decode_seeds: &[u64],
    group: usize,
) -> Result<Vec<Trajectory>> {
    if noise_seeds.len() < 2 {
        return Err(Error::Contract("a rollout group needs at least 2 members".into()));
    }
    let mode = wrapped.mode();
    wrapped.set_mode(NoiseMode::Sequence);
    let result = wrapped.generate_members(adapter, prompt, decode, noise_seeds, decode_seeds);
    wrapped.set_mode(mode);
    let make = |i: usize, tokens: Vec<u32>, logprobs: Vec<f64>, failed: bool| {
        let text = tokenizer::decode(&tokens);
        Trajectory {
            prompt: prompt.to_vec(),
            answer: crate::population::extract_answer(&text),
            text,
            response: tokens,
            logprobs,
            noise_seed: noise_seeds[i],
            decode_seed: decode_seeds[i],
            reward: 0.0,
            group,
            failed,
        }
    };
    Ok(match result {
        Ok(gens) => gens.into_iter().enumerate().map(|(i, g)| make(i, g.tokens, g.logprobs, false)).collect(),
        Err(_) => (0..noise_seeds.len()).map(|i| make(i, Vec::new(), Vec::new(), true)).collect(),
    })
}

/// `(r − mean) / (std + 1e-4)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ADV_EPS;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// 1 for members whose answer matches the majority vote, else 0.
pub fn ttrl_rewards(answers: &[Option<String>]) -> Vec<f64> {
    let vote = majority_vote(answers);
    answers
        .iter()
        .map(|a| match (&vote.consensus, a) {
            (Some(c), Some(a)) if a == c => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Diagnostics of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    /// False when every gradient was exactly zero and the step was skipped.
    pub applied: bool,
}

struct PackedBatch {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    rows: usize,
    /// `(trajectory index, first logit row)` per used trajectory.
    spans: Vec<(usize, usize)>,
}

fn pack(trajs: &[Trajectory], used: &[usize]) -> PackedBatch {
    let len = used.iter().map(|&i| trajs[i].prompt.len() + trajs[i].response.len()).max().unwrap_or(0);
    let rows = used.len();
    let mut tokens = vec![PAD; rows * len];
    let mut targets = vec![PAD; rows * len];
    let mut spans = Vec::with_capacity(rows);
    for (r, &i) in used.iter().enumerate() {
        let t = &trajs[i];
        let seq: Vec<u32> = t.prompt.iter().chain(&t.response).copied().collect();
        tokens[r * len..r * len + seq.len()].copy_from_slice(&seq);
        for p in 0..seq.len() - 1 {
            targets[r * len + p] = seq[p + 1];
        }
        spans.push((i, r * len + t.prompt.len() - 1));
    }
    PackedBatch { tokens, targets, rows, spans }
}

/// Per-token log-probabilities of every trajectory under `adapter`, noise off.
fn current_logprobs(
    wrapped: &mut WrappedModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    batch: &PackedBatch,
    temperature: f32,
) -> Result<Vec<f32>> {
    let base = Arc::clone(wrapped.base());
    let model = ModelRef::with_adapter(&base, adapter);
    let mut tape = Tape::new(false);
    let bound = model.bind(&mut tape, Trainable::Nothing);
    let out = forward(&mut tape, model.config(), &bound, &batch.tokens, batch.rows, None, wrapped)?;
    let lp = tape.token_logprobs(out.logits, &batch.targets, temperature)?;
    Ok(tape.value(lp).data().to_vec())
}

/// Gradient of the clipped policy objective w.r.t. every adapter tensor.
///
/// Loss: `−mean_i (1/|y_i|) Σ_t min(ρ_t A_i, clip(ρ_t, 1±ε) A_i) + β·KL`,
/// with `ρ_t = exp(logp_now − logp_rollout)` and the k3 KL estimator against
/// the adapter-free model. Current log-probabilities use noise off. Returns
/// gradients in [`LoraAdapter::named`] order.
pub fn policy_gradient(
    wrapped: &mut WrappedModel<f32>,
    adapter: &LoraAdapter<f32>,
    trajectories: &[Trajectory],
    advantages: &[f64],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(UpdateStats, Vec<Vec<f32>>)> {
    if trajectories.len() != advantages.len() {
        return Err(Error::Dimension("one advantage per trajectory".into()));
    }
    for t in trajectories {
        if t.response.len() != t.logprobs.len() {
            return Err(Error::Contract("trajectory needs one log-prob per response token".into()));
        }
        if t.logprobs.iter().any(|l| !l.is_finite()) {
            return Err(Error::Divergence { step, detail: "non-finite rollout log-prob".into() });
        }
    }
    let zeros = || adapter.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
    let used: Vec<usize> = (0..trajectories.len()).filter(|&i| !trajectories[i].response.is_empty()).collect();
    if used.is_empty() {
        return Ok((UpdateStats::default(), zeros()));
    }
    let batch = pack(trajectories, &used);
    let mode = wrapped.mode();
    wrapped.set_mode(NoiseMode::Off);
    let result = (|| {
        let temperature = cfg.temperature as f32;
        let reference = if cfg.kl_coef > 0.0 {
            Some(current_logprobs(wrapped, None, &batch, temperature)?)
        } else {
            None
        };
        let base = Arc::clone(wrapped.base());
        let model = ModelRef::with_adapter(&base, Some(adapter));
        let mut tape = Tape::new(true);
        let bound = model.bind(&mut tape, Trainable::Adapter);
        let out = forward(&mut tape, model.config(), &bound, &batch.tokens, batch.rows, None, wrapped)?;
        let lp_var = tape.token_logprobs(out.logits, &batch.targets, temperature)?;
        let lp = tape.value(lp_var).data().to_vec();
        let mut coeffs = vec![0.0f32; lp.len()];
        let n = used.len() as f64;
        let (eps, beta) = (cfg.clip_ratio, cfg.kl_coef);
        let (mut loss, mut ratio_sum, mut clipped, mut kl_sum, mut tokens) = (0.0, 0.0, 0usize, 0.0, 0usize);
        for &(i, row0) in &batch.spans {
            let t = &trajectories[i];
            let a = advantages[i];
            let m = t.response.len() as f64;
            for (j, &old) in t.logprobs.iter().enumerate() {
                let row = row0 + j;
                let now = lp[row] as f64;
                let ratio = (now - old).exp();
                let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                let (unclipped_obj, clipped_obj) = (ratio * a, clipped_ratio * a);
                let active = unclipped_obj <= clipped_obj;
                let mut g = if active { ratio * a } else { 0.0 };
                let mut obj = unclipped_obj.min(clipped_obj);
                if let Some(reference) = &reference {
                    let diff = reference[row] as f64 - now;
                    let kl = diff.exp() - diff - 1.0;
                    kl_sum += kl;
                    obj -= beta * kl;
                    g -= beta * (1.0 - diff.exp());
                }
                loss -= obj / (m * n);
                coeffs[row] = (-g / (m * n)) as f32;
                ratio_sum += ratio;
                clipped += (!active) as usize;
                tokens += 1;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("non-finite policy loss {loss}") });
        }
        let loss_var = tape.weighted_scalar(lp_var, loss as f32, coeffs)?;
        let grads = tape.backward(loss_var)?;
        let gs: Vec<Vec<f32>> = bound
            .adapter_vars()
            .iter()
            .map(|&v| grads.get(v).map(|g| g.into_owned()).unwrap_or_default())
            .collect();
        let grad_norm = gs.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, detail: "non-finite adapter gradient".into() });
        }
        let stats = UpdateStats {
            loss,
            mean_ratio: ratio_sum / tokens.max(1) as f64,
            clip_fraction: clipped as f64 / tokens.max(1) as f64,
            kl: kl_sum / tokens.max(1) as f64,
            grad_norm,
            tokens,
            applied: false,
        };
        Ok((stats, gs))
    })();
    wrapped.set_mode(mode);
    result
}

/// One policy-gradient step on the adapter. When every gradient is exactly
/// zero (for instance all advantages zero) the optimizer is not stepped, so
/// the adapter and its moments stay unchanged.
pub fn grpo_update(
    wrapped: &mut WrappedModel<f32>,
    adapter: &mut LoraAdapter<f32>,
    opt: &mut Adam,
    trajectories: &[Trajectory],
    advantages: &[f64],
    cfg: &TrainConfig,
    step: usize,
) -> Result<UpdateStats> {
    let (mut stats, grads) = policy_gradient(wrapped, adapter, trajectories, advantages, cfg, step)?;
    if stats.grad_norm > 0.0 {
        let mut slots: Vec<&mut [f32]> = adapter.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        let g: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut slots, &g, 1.0);
        stats.applied = true;
    }
    Ok(stats)
}

/// One JSON-lines record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean rollout reward (absent at step 0).
    pub mean_reward: Option<f64>,
    /// Fraction of rollouts whose answer is actually correct.
    pub rollout_accuracy: Option<f64>,
    /// Fraction of groups with more than one distinct response.
    pub distinct_groups: Option<f64>,
    pub loss: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub kl: Option<f64>,
    /// Greedy accuracy with noise off.
    pub pass_at_1: Option<f64>,
    /// Any-correct over a population of `group_size` personas.
    pub pass_at_g: Option<f64>,
    /// Mean ground-truth correctness of the population members.
    pub mean_accuracy: Option<f64>,
    pub diversity: Option<f64>,
    pub scs: Option<f64>,
}

impl StepRecord {
    fn empty(step: usize) -> Self {
        Self {
            step,
            mean_reward: None,
            rollout_accuracy: None,
            distinct_groups: None,
            loss: None,
            clip_fraction: None,
            kl: None,
            pass_at_1: None,
            pass_at_g: None,
            mean_accuracy: None,
            diversity: None,
            scs: None,
        }
    }
}

/// Held-out evaluation numbers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub pass_at_1: f64,
    pub pass_at_g: f64,
    pub mean_accuracy: f64,
    pub diversity: f64,
    pub scs: Option<f64>,
}

/// Greedy accuracy with noise off.
pub fn greedy_accuracy(params: &ModelParams<f32>, adapter: Option<&LoraAdapter<f32>>, set: &[Instance], max_new_tokens: usize) -> Result<f64> {
    let model = ModelRef::with_adapter(params, adapter);
    let cfg = DecodeConfig::greedy(max_new_tokens);
    let mut hits = 0.0;
    for inst in set {
        let g = generate(model, &inst.prompt_tokens(), &cfg, &mut NoHooks)?;
        hits += verifiable_reward(inst, &tokenizer::decode(&g.tokens));
    }
    Ok(hits / set.len().max(1) as f64)
}

/// Greedy pass@1 plus a `group_size`-member population at the run's σ and
/// temperature for pass@G, diversity and step-wise consistency.
pub fn evaluate(
    wrapped: &mut WrappedModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    encoder: &mut Encoder<'_>,
    set: &[Instance],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EvalResult> {
    let pass_at_1 = greedy_accuracy(wrapped.base(), adapter, set, cfg.max_new_tokens)?;
    let decode = DecodeConfig { seed: derive_seed(seed, 1), ..cfg.decode() };
    let mode = wrapped.mode();
    wrapped.set_mode(NoiseMode::Sequence);
    let (mut any, mut acc, mut div, mut scs_sum, mut scs_n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (q, inst) in set.iter().enumerate() {
        let members = sample_population(
            wrapped,
            adapter,
            &inst.prompt_tokens(),
            cfg.group_size,
            &decode,
            derive_seed(seed, 1000 + q as u64),
            Schedule::Batched,
        )?;
        let hits = members.iter().filter(|m| m.answer.as_deref() == Some(inst.answer.as_str())).count();
        any += (hits > 0) as u8 as f64;
        acc += hits as f64 / members.len() as f64;
        let embs = members.iter().map(|m| encoder.embed_text(&m.text).map(|e| e.vector)).collect::<Result<Vec<_>>>()?;
        div += pairwise_cosine_diversity(&embs)?;
        for m in &members {
            if let Some(s) = scs(&segment_steps(&m.text), |s| encoder.embed_text(s).map(|e| e.vector))? {
                scs_sum += s;
                scs_n += 1;
            }
        }
    }
    wrapped.set_mode(mode);
    let n = set.len().max(1) as f64;
    Ok(EvalResult {
        pass_at_1,
        pass_at_g: any / n,
        mean_accuracy: acc / n,
        diversity: div / n,
        scs: (scs_n > 0).then(|| scs_sum / scs_n as f64),
    })
}

/// Where a run keeps its metrics log and adapter checkpoint.
pub struct RunFiles<'p> {
    pub dir: &'p Path,
    pub resume: bool,
}

impl RunFiles<'_> {
    pub fn metrics(&self) -> std::path::PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self) -> std::path::PathBuf {
        self.dir.join("adapter.btrn")
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    /// First step whose trailing-mean reward reached the threshold.
    pub steps_to_threshold: Option<usize>,
    pub adapter: LoraAdapter<f32>,
}

fn trailing_threshold(records: &[StepRecord], window: usize, threshold: f64) -> Option<usize> {
    let rewards: Vec<(usize, f64)> = records.iter().filter_map(|r| r.mean_reward.map(|m| (r.step, m))).collect();
    (window..=rewards.len()).find_map(|end| {
        let mean = rewards[end - window..end].iter().map(|(_, r)| r).sum::<f64>() / window as f64;
        (mean >= threshold).then_some(rewards[end - 1].0)
    })
}

/// Errors when the adapter or the adapted model's logits on a probe
/// sequence have gone non-finite.
pub fn check_finite(wrapped: &mut WrappedModel<f32>, adapter: &LoraAdapter<f32>, trajs: &[Trajectory], step: usize) -> Result<()> {
    if adapter.named().iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::Divergence { step, detail: "adapter weights became non-finite".into() });
    }
    if trajs.iter().all(|t| t.failed) {
        return Err(Error::Divergence { step, detail: "every rollout of the step failed".into() });
    }
    let probe: Vec<u32> = trajs[0].prompt.clone();
    let mode = wrapped.mode();
    wrapped.set_mode(NoiseMode::Off);
    let logits = wrapped.logits(Some(adapter), &probe, 1);
    wrapped.set_mode(mode);
    if !logits?.all_finite() {
        return Err(Error::Divergence { step, detail: "adapted model produces non-finite logits".into() });
    }
    Ok(())
}

fn append_record(path: &Path, rec: &StepRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

/// Runs GRPO (`Rlvr`) or majority-vote TTRL on top of `base`.
///
/// Step 0 is an evaluation-only record. Each later step samples
/// `batch_prompts` prompts, rolls out `group_size` personas per prompt and
/// applies one update. Evaluation happens every `eval_interval` steps;
/// checkpoints are written at those steps and at the last step. Evaluation
/// depends only on the step index, never on where a run stopped, and all
/// randomness derives from `(cfg.seed, step)`, so a resumed run reproduces
/// the uninterrupted log line for line.
pub fn train_loop(
    base: Arc<ModelParams<f32>>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    mode: TrainMode,
    files: Option<&RunFiles<'_>>,
) -> Result<RunSummary> {
    cfg.validate()?;
    task.validate()?;
    let mcfg = base.config.clone();
    let mut eval_set = task.eval_set();
    if let Some(n) = cfg.eval_prompts {
        eval_set.truncate(n);
    }
    // TTRL adapts on the unlabeled held-out prompts themselves
    let train_set = match mode {
        TrainMode::Rlvr => task.train_set(),
        TrainMode::Ttrl => eval_set.clone(),
    };
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Config("empty training or evaluation set".into()));
    }
    let prior = NoisePrior::new(cfg.mu, cfg.sigma)?;
    let mut wrapped = apply_bayesian_transform(Arc::clone(&base), prior, &cfg.target)?;
    let sizes = |a: &LoraAdapter<f32>| a.named().iter().map(|(_, t)| t.len()).collect::<Vec<_>>();
    let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut adapter = LoraAdapter::<f32>::new(&mcfg, cfg.lora.clone(), derive_seed(cfg.seed, 0xADA))?;
    let mut opt = Adam::new(adam, &sizes(&adapter));
    let mut records: Vec<StepRecord> = Vec::new();
    let mut start = 0usize;
    let mut kept: Vec<String> = Vec::new();

    if let Some(f) = files {
        fs::create_dir_all(f.dir)?;
        if f.resume && f.checkpoint().exists() {
            let state = load_adapter(&mcfg, &f.checkpoint(), adam)?;
            if state.adapter.config != cfg.lora {
                return Err(Error::Config("checkpoint adapter config differs from the run config".into()));
            }
            adapter = state.adapter;
            opt = state.optimizer.unwrap_or_else(|| Adam::new(adam, &sizes(&adapter)));
            start = state.step + 1;
            if f.metrics().exists() {
                // keep the logged lines verbatim; re-serializing parsed floats
                // is not guaranteed to reproduce the same text
                let file = fs::File::open(f.metrics())?;
                for line in std::io::BufReader::new(file).lines() {
                    let line = line?;
                    let rec: StepRecord = serde_json::from_str(&line)?;
                    if rec.step <= state.step {
                        records.push(rec);
                        kept.push(line);
                    }
                }
            }
        }
        let mut out = fs::File::create(f.metrics())?;
        for line in &kept {
            writeln!(out, "{line}")?;
        }
    }

    let encoder_params = Arc::clone(&base);
    let mut encoder = Encoder::new(&encoder_params);
    let decode = cfg.decode();
    let save = |adapter: &LoraAdapter<f32>, opt: &Adam, step: usize| -> Result<()> {
        if let Some(f) = files {
            let state = AdapterState { adapter: adapter.clone(), optimizer: Some(opt.clone()), step };
            save_adapter(&mcfg, &state, &f.checkpoint())?;
        }
        Ok(())
    };

    for step in start..=cfg.steps {
        let mut rec = StepRecord::empty(step);
        let step_seed = derive_seed(cfg.seed, step as u64);
        if step > 0 {
            let mut rng = stream(step_seed, 0);
            let picks = sample(&mut rng, train_set.len(), cfg.batch_prompts.min(train_set.len()));
            let mut trajs = Vec::new();
            let mut advantages = Vec::new();
            let (mut distinct, mut correct) = (0usize, 0.0);
            for (j, idx) in picks.iter().enumerate() {
                let inst = &train_set[idx];
                let noise: Vec<u64> = (0..cfg.group_size).map(|g| member_seed(step_seed ^ 0x5EED, j * cfg.group_size + g)).collect();
                let dec: Vec<u64> = (0..cfg.group_size).map(|g| member_seed(step_seed ^ 0xDEC, j * cfg.group_size + g)).collect();
                let mut group = rollout_group(&mut wrapped, Some(&adapter), &inst.prompt_tokens(), &decode, &noise, &dec, j)?;
                let rewards = match mode {
                    TrainMode::Rlvr => group.iter().map(|t| verifiable_reward(inst, &t.text)).collect(),
                    TrainMode::Ttrl => ttrl_rewards(&group.iter().map(|t| t.answer.clone()).collect::<Vec<_>>()),
                };
                for (t, r) in group.iter_mut().zip(&rewards) {
                    t.reward = if t.failed { 0.0 } else { *r };
                    correct += verifiable_reward(inst, &t.text);
                }
                let texts: std::collections::BTreeSet<&Vec<u32>> = group.iter().map(|t| &t.response).collect();
                distinct += (texts.len() > 1) as usize;
                advantages.extend(grpo_advantages(&group.iter().map(|t| t.reward).collect::<Vec<_>>()));
                trajs.extend(group);
            }
            let n = trajs.len() as f64;
            rec.mean_reward = Some(trajs.iter().map(|t| t.reward).sum::<f64>() / n);
            rec.rollout_accuracy = Some(correct / n);
            rec.distinct_groups = Some(distinct as f64 / picks.len() as f64);
            let stats = grpo_update(&mut wrapped, &mut adapter, &mut opt, &trajs, &advantages, cfg, step)?;
            check_finite(&mut wrapped, &adapter, &trajs, step)?;
            rec.loss = Some(stats.loss);
            rec.clip_fraction = Some(stats.clip_fraction);
            rec.kl = (cfg.kl_coef > 0.0).then_some(stats.kl);
        }
        let is_eval = step % cfg.eval_interval == 0;
        if is_eval {
            let e = evaluate(&mut wrapped, Some(&adapter), &mut encoder, &eval_set, cfg, derive_seed(step_seed, 0xE7A1))?;
            rec.pass_at_1 = Some(e.pass_at_1);
            rec.pass_at_g = Some(e.pass_at_g);
            rec.mean_accuracy = Some(e.mean_accuracy);
            rec.diversity = Some(e.diversity);
            rec.scs = e.scs;
        }
        if let Some(f) = files {
            append_record(&f.metrics(), &rec)?;
        }
        records.push(rec);
        if is_eval || step == cfg.steps {
            save(&adapter, &opt, step)?;
        }
    }
    let steps_to_threshold = trailing_threshold(&records, cfg.threshold_window, cfg.reward_threshold);
    Ok(RunSummary { records, steps_to_threshold, adapter })
}
