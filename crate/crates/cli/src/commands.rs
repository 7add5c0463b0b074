//! Subcommand implementations. Each `cmd_*` resolves its config, runs, and
//! writes artifacts; the `run_*` functions return the data for reuse.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use btrans::bayes::{apply_bayesian_transform, memory_report, seven_b_config, MemoryReport, NoiseMode, NoisePrior, WrappedModel};
use btrans::checkpoint::{load_adapter, load_checkpoint, save_checkpoint};
use btrans::generate::DecodeConfig;
use btrans::lora::LoraAdapter;
use btrans::metrics::{
    diversity_csv, pairwise_cosine_diversity, pca_project, scatter_csv, scs, segment_steps, DiversityRow, Encoder, ScatterRow,
};
use btrans::model::ModelParams;
use btrans::optim::AdamConfig;
use btrans::population::{canonicalize, sample_population, MemberRecord, PopulationResult, Schedule};
use btrans::rl::{evaluate, greedy_accuracy, train_loop, RunFiles, StepRecord, TrainMode};
use btrans::rng::derive_seed;
use btrans::sft::pretrain;
use btrans::tokenizer;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{Command, Common, Preset};
use crate::config::{ExperimentConfig, RunManifest, FORMAT_VERSION};
use crate::CliError;

/// A prompt with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptItem {
    pub id: usize,
    pub prompt: String,
    pub answer: Option<String>,
}

/// Task prompts end in a newline; add one when missing.
pub fn normalize_prompt(text: &str) -> String {
    if text.ends_with('\n') {
        text.to_string()
    } else {
        format!("{text}\n")
    }
}

/// Reads `prompt[<TAB>answer]` lines, or takes the task's held-out set.
pub fn load_prompts(cfg: &ExperimentConfig, path: Option<&Path>) -> anyhow::Result<Vec<PromptItem>> {
    let mut items: Vec<PromptItem> = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("cannot read prompts {}: {e}", p.display())))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(id, line)| {
                    let (prompt, answer) = match line.split_once('\t') {
                        Some((p, a)) => (p, Some(canonicalize(a))),
                        None => (line, None),
                    };
                    PromptItem { id, prompt: normalize_prompt(prompt), answer }
                })
                .collect()
        }
        None => cfg
            .task
            .eval_set()
            .into_iter()
            .enumerate()
            .map(|(id, inst)| PromptItem { id, prompt: inst.prompt, answer: Some(inst.answer) })
            .collect(),
    };
    if let Some(n) = cfg.population.limit {
        items.truncate(n);
    }
    for it in &items {
        tokenizer::encode(&it.prompt).map_err(|e| CliError::input(format!("prompt {}: {e}", it.id)))?;
    }
    if items.is_empty() {
        return Err(CliError::input("no prompts").into());
    }
    Ok(items)
}

/// The configured checkpoint, or a fresh init of `model.config`.
pub fn load_base(cfg: &ExperimentConfig) -> anyhow::Result<Arc<ModelParams<f32>>> {
    match &cfg.model.checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::input(format!("checkpoint not found: {}", p.display())).into());
            }
            let params = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok(Arc::new(params))
        }
        None => Ok(Arc::new(ModelParams::init(&cfg.model.config, cfg.model.init_seed)?)),
    }
}

pub fn load_adapter_file(base: &ModelParams<f32>, path: Option<&Path>) -> anyhow::Result<Option<LoraAdapter<f32>>> {
    let Some(p) = path else { return Ok(None) };
    if !p.exists() {
        return Err(CliError::input(format!("adapter not found: {}", p.display())).into());
    }
    let state = load_adapter(&base.config, p, AdamConfig::default()).with_context(|| format!("loading adapter {}", p.display()))?;
    Ok(Some(state.adapter))
}

fn wrap(base: &Arc<ModelParams<f32>>, cfg: &ExperimentConfig, sigma: f64) -> anyhow::Result<WrappedModel<f32>> {
    let mut w = apply_bayesian_transform(Arc::clone(base), NoisePrior::new(cfg.noise.mu, sigma)?, &cfg.noise.target)?;
    w.set_mode(cfg.noise.mode);
    Ok(w)
}

fn output_dir(cfg: &ExperimentConfig, command: &str) -> anyhow::Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| CliError::input(format!("{command} needs an output directory (--out or output_dir)")).into())
}

/// Writes `config.json` describing the run.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let m = RunManifest { format_version: FORMAT_VERSION, command: command.into(), config: cfg.clone() };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Everything measured for one prompt's population.
pub struct PromptOutcome {
    pub members: Vec<MemberRecord>,
    pub embeddings: Vec<Vec<f64>>,
    pub diversity: Option<f64>,
    /// Step-wise consistency per member with at least two steps.
    pub scs: Vec<f64>,
    pub correct: Option<Vec<bool>>,
}

/// Member seeds depend only on the noise/decode seeds and the prompt id, so
/// σ sweeps and mode ablations compare matched personas.
pub fn run_prompt(
    wrapped: &mut WrappedModel<f32>,
    adapter: Option<&LoraAdapter<f32>>,
    item: &PromptItem,
    k: usize,
    cfg: &ExperimentConfig,
) -> anyhow::Result<PromptOutcome> {
    let decode = DecodeConfig { seed: derive_seed(cfg.decode.seed, item.id as u64), ..cfg.decode.clone() };
    let prompt = tokenizer::encode_prompt(&item.prompt)?;
    let base_seed = derive_seed(cfg.noise.seed, item.id as u64);
    let members = sample_population(wrapped, adapter, &prompt, k, &decode, base_seed, Schedule::Batched)?;
    let base = Arc::clone(wrapped.base());
    let mut enc = Encoder::new(&base);
    let embeddings = members.iter().map(|m| enc.embed_text(&m.text).map(|e| e.vector)).collect::<btrans::Result<Vec<_>>>()?;
    let diversity = if k >= 2 { Some(pairwise_cosine_diversity(&embeddings)?) } else { None };
    let mut scs_vals = Vec::new();
    for m in &members {
        if let Some(v) = scs(&segment_steps(&m.text), |s| enc.embed_text(s).map(|e| e.vector))? {
            scs_vals.push(v);
        }
    }
    let correct = item.answer.as_ref().map(|a| members.iter().map(|m| m.answer.as_ref() == Some(a)).collect());
    Ok(PromptOutcome { members, embeddings, diversity, scs: scs_vals, correct })
}

fn run_prompts(
    base: &Arc<ModelParams<f32>>,
    adapter: Option<&LoraAdapter<f32>>,
    cfg: &ExperimentConfig,
    sigma: f64,
    mode: NoiseMode,
    prompts: &[PromptItem],
    threads: usize,
) -> anyhow::Result<Vec<PromptOutcome>> {
    let mut template = wrap(base, cfg, sigma)?;
    template.set_mode(mode);
    let k = cfg.population.k;
    pool(threads)?.install(|| {
        prompts
            .par_iter()
            .map(|item| {
                let mut w = template.clone();
                run_prompt(&mut w, adapter, item, k, cfg)
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })
}

/// Per-σ aggregate of a population run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaSummary {
    pub sigma: f64,
    pub prompts: usize,
    pub k: usize,
    pub diversity: Option<f64>,
    pub scs_mean: Option<f64>,
    /// Mean pass@k curve over prompts with a known answer.
    pub pass_at_k: Option<Vec<f64>>,
}

pub struct PopulationReport {
    pub results: Vec<PopulationResult>,
    pub diversity_rows: Vec<DiversityRow>,
    pub scatter: Vec<ScatterRow>,
    pub summaries: Vec<SigmaSummary>,
}

impl PopulationReport {
    pub fn jsonl(&self) -> String {
        self.results.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

pub fn run_population(
    base: &Arc<ModelParams<f32>>,
    adapter: Option<&LoraAdapter<f32>>,
    cfg: &ExperimentConfig,
    prompts: &[PromptItem],
    threads: usize,
) -> anyhow::Result<PopulationReport> {
    let sigmas = if cfg.population.sigmas.is_empty() { vec![cfg.noise.sigma] } else { cfg.population.sigmas.clone() };
    let k = cfg.population.k;
    let mut results = Vec::new();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut points = Vec::new();
    let mut point_ids = Vec::new();
    for &sigma in &sigmas {
        let outcomes = run_prompts(base, adapter, cfg, sigma, cfg.noise.mode, prompts, threads)?;
        let diversity = mean(outcomes.iter().filter_map(|o| o.diversity));
        let scs_mean = mean(outcomes.iter().flat_map(|o| o.scs.iter().copied()));
        let curves: Vec<Vec<f64>> = outcomes
            .iter()
            .filter_map(|o| o.correct.as_ref())
            .map(|bits| btrans::population::pass_at_k_curve(std::slice::from_ref(bits)))
            .collect::<btrans::Result<_>>()?;
        let pass_at_k = (!curves.is_empty()).then(|| (0..k).map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64).collect());
        rows.push(DiversityRow {
            config: cfg.noise.mode.name().to_string(),
            sigma,
            temperature: cfg.decode.temperature,
            diversity: diversity.unwrap_or(0.0),
            scs_mean,
        });
        summaries.push(SigmaSummary { sigma, prompts: prompts.len(), k, diversity, scs_mean, pass_at_k });
        for (item, o) in prompts.iter().zip(outcomes) {
            for (m, e) in o.members.iter().zip(&o.embeddings) {
                points.push(e.clone());
                point_ids.push((item.id, m.k, sigma));
            }
            results.push(PopulationResult::new(item.id, sigma, o.members, item.answer.as_deref(), o.diversity));
        }
    }
    // shared axes across the sweep so σ groups are directly comparable
    let scatter = if points.len() > 2 {
        let proj = pca_project(&points, 2)?;
        point_ids
            .iter()
            .zip(&proj.coords)
            .map(|(&(prompt_id, member_k, sigma), c)| ScatterRow { prompt_id, member_k, pc1: c[0], pc2: c[1], label: format!("sigma={sigma}") })
            .collect()
    } else {
        Vec::new()
    };
    Ok(PopulationReport { results, diversity_rows: rows, scatter, summaries })
}

/// One line of the mode ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: NoiseMode,
    pub sigma: f64,
    pub temperature: f64,
    pub generations: usize,
    pub accuracy: Option<f64>,
    pub scs_mean: Option<f64>,
    pub diversity: Option<f64>,
}

pub fn run_ablation(
    base: &Arc<ModelParams<f32>>,
    adapter: Option<&LoraAdapter<f32>>,
    cfg: &ExperimentConfig,
    prompts: &[PromptItem],
    threads: usize,
) -> anyhow::Result<Vec<AblationRow>> {
    NoiseMode::ALL
        .iter()
        .map(|&mode| {
            let outcomes = run_prompts(base, adapter, cfg, cfg.noise.sigma, mode, prompts, threads)?;
            Ok(AblationRow {
                mode,
                sigma: cfg.noise.sigma,
                temperature: cfg.decode.temperature,
                generations: outcomes.iter().map(|o| o.members.len()).sum(),
                accuracy: mean(outcomes.iter().filter_map(|o| o.correct.as_ref()).flatten().map(|&b| b as u8 as f64)),
                scs_mean: mean(outcomes.iter().flat_map(|o| o.scs.iter().copied())),
                diversity: mean(outcomes.iter().filter_map(|o| o.diversity)),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode,sigma,temperature,generations,accuracy,scs_mean,diversity\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.mode.name(),
            r.sigma,
            r.temperature,
            r.generations,
            opt(r.accuracy),
            opt(r.scs_mean),
            opt(r.diversity)
        );
    }
    s
}

fn cmd_generate(common: &Common, prompt: &str) -> anyhow::Result<()> {
    let cfg = common.resolve()?;
    cfg.validate()?;
    let base = load_base(&cfg)?;
    let adapter = load_adapter_file(&base, common.adapter.as_deref())?;
    let mut w = wrap(&base, &cfg, cfg.noise.sigma)?;
    let ids = tokenizer::encode_prompt(&normalize_prompt(prompt)).map_err(|e| CliError::input(e.to_string()))?;
    let mut members = sample_population(&mut w, adapter.as_ref(), &ids, 1, &cfg.decode, cfg.noise.seed, Schedule::Batched)?;
    let m = members.remove(0);
    if let Some(e) = &m.error {
        anyhow::bail!(CliError::input(format!("generation failed: {e}")));
    }
    println!("{}", m.text);
    if let Some(dir) = &cfg.output_dir {
        write_manifest(dir, "generate", &cfg)?;
        fs::write(dir.join("generation.jsonl"), serde_json::to_string(&m)? + "\n")?;
    }
    Ok(())
}

fn cmd_population(common: &Common, prompt_args: &crate::args::PromptArgs, sigmas: Option<&[f64]>) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    prompt_args.apply(&mut cfg);
    if let Some(s) = sigmas {
        cfg.population.sigmas = s.to_vec();
    }
    cfg.validate()?;
    let prompts = load_prompts(&cfg, prompt_args.prompts.as_deref())?;
    let base = load_base(&cfg)?;
    let adapter = load_adapter_file(&base, common.adapter.as_deref())?;
    let report = run_population(&base, adapter.as_ref(), &cfg, &prompts, common.threads())?;
    for s in &report.summaries {
        println!("{}", serde_json::to_string(s)?);
    }
    if let Some(dir) = &cfg.output_dir {
        write_manifest(dir, "population", &cfg)?;
        fs::write(dir.join("population.jsonl"), report.jsonl())?;
        fs::write(dir.join("diversity.csv"), diversity_csv(&report.diversity_rows))?;
        fs::write(dir.join("pca.csv"), scatter_csv(&report.scatter))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summaries)? + "\n")?;
    }
    Ok(())
}

fn cmd_ablate(common: &Common, prompt_args: &crate::args::PromptArgs) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    prompt_args.apply(&mut cfg);
    cfg.validate()?;
    let prompts = load_prompts(&cfg, prompt_args.prompts.as_deref())?;
    let base = load_base(&cfg)?;
    let adapter = load_adapter_file(&base, common.adapter.as_deref())?;
    let rows = run_ablation(&base, adapter.as_ref(), &cfg, &prompts, common.threads())?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &cfg.output_dir {
        write_manifest(dir, "ablate", &cfg)?;
        fs::write(dir.join("ablation.csv"), csv)?;
    }
    Ok(())
}

/// Final numbers of a training run.
#[derive(Serialize)]
struct TrainSummary<'a> {
    steps_to_threshold: Option<usize>,
    reward_threshold: f64,
    last: Option<&'a StepRecord>,
    /// Most recent record carrying evaluation metrics.
    last_eval: Option<&'a StepRecord>,
}

fn cmd_train(common: &Common, mode: TrainMode, steps: Option<usize>, resume: bool) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let dir = output_dir(&cfg, "train")?;
    let base = load_base(&cfg)?;
    let manifest_path = dir.join("config.json");
    if resume && manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let old: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::input(format!("bad run manifest: {e}")))?;
        let mut expected = old.config.clone();
        expected.train.steps = cfg.train.steps;
        if expected != cfg || old.command != train_command(mode) {
            return Err(CliError::input("resume config differs from the run directory's config.json").into());
        }
    }
    write_manifest(&dir, train_command(mode), &cfg)?;
    let files = RunFiles { dir: &dir, resume };
    let summary = train_loop(base, &cfg.task, &cfg.train_config(), mode, Some(&files))?;
    let out = TrainSummary {
        steps_to_threshold: summary.steps_to_threshold,
        reward_threshold: cfg.train.reward_threshold,
        last: summary.records.last(),
        last_eval: summary.records.iter().rev().find(|r| r.pass_at_1.is_some()),
    };
    let text = serde_json::to_string_pretty(&out)?;
    println!("{text}");
    fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(())
}

fn train_command(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Rlvr => "train-rlvr",
        TrainMode::Ttrl => "train-ttrl",
    }
}

fn cmd_memory_report(common: &Common, batch: usize, preset: Preset) -> anyhow::Result<MemoryReport> {
    let cfg = common.resolve()?;
    let model = match preset {
        Preset::SevenB => seven_b_config(),
        Preset::Model => match &cfg.model.checkpoint {
            Some(_) => load_base(&cfg)?.config.clone(),
            None => cfg.model.config.clone(),
        },
    };
    model.validate()?;
    let r = memory_report(&model, &cfg.noise.target, batch)?;
    println!("sites {}", r.sites);
    println!("batch {}", r.batch);
    println!("d_model {}", r.d_model);
    println!("noise_cache_bytes {}", r.noise_cache_bytes);
    println!("mask_cache_bytes {}", r.mask_cache_bytes);
    println!("ratio {}", r.ratio.map(|x| format!("{x:.1}")).unwrap_or_else(|| "n/a".into()));
    if let Some(dir) = &cfg.output_dir {
        write_manifest(dir, "memory-report", &cfg)?;
        fs::write(dir.join("memory.json"), serde_json::to_string_pretty(&r)? + "\n")?;
    }
    Ok(r)
}

fn cmd_eval(common: &Common, k: Option<usize>, limit: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(k) = k {
        cfg.population.k = k;
    }
    if let Some(l) = limit {
        cfg.population.limit = Some(l);
    }
    cfg.validate()?;
    let base = load_base(&cfg)?;
    let adapter = load_adapter_file(&base, common.adapter.as_deref())?;
    let mut set = cfg.task.eval_set();
    if let Some(n) = cfg.population.limit {
        set.truncate(n);
    }
    let mut tc = cfg.train_config();
    tc.group_size = cfg.population.k;
    tc.temperature = cfg.decode.temperature;
    tc.max_new_tokens = cfg.decode.max_new_tokens;
    let mut w = wrap(&base, &cfg, cfg.noise.sigma)?;
    let mut enc = Encoder::new(&base);
    let r = evaluate(&mut w, adapter.as_ref(), &mut enc, &set, &tc, cfg.noise.seed)?;
    let text = serde_json::to_string_pretty(&r)?;
    println!("{text}");
    if let Some(dir) = &cfg.output_dir {
        write_manifest(dir, "eval", &cfg)?;
        fs::write(dir.join("eval.json"), text + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    greedy_accuracy: f64,
}

fn cmd_pretrain(common: &Common, steps: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    cfg.validate()?;
    let dir = output_dir(&cfg, "pretrain")?;
    let mut last = None;
    let params = pretrain(&cfg.model.config, &cfg.task, &cfg.pretrain, |step, loss| {
        last = Some(loss);
        if step % 50 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
    })?;
    let ckpt = dir.join("base.btrn");
    write_manifest(&dir, "pretrain", &cfg)?;
    save_checkpoint(&params, &ckpt)?;
    let acc = greedy_accuracy(&params, None, &cfg.task.eval_set(), cfg.decode.max_new_tokens)?;
    let s = PretrainSummary { steps: cfg.pretrain.steps, final_loss: last, greedy_accuracy: acc };
    let text = serde_json::to_string_pretty(&s)?;
    println!("{text}");
    fs::write(dir.join("pretrain.json"), text + "\n")?;
    Ok(())
}

/// Dispatches a parsed command line.
pub fn run(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Pretrain { common, steps } => cmd_pretrain(common, *steps),
        Command::Generate { common, prompt } => cmd_generate(common, prompt),
        Command::Population { common, prompts, sigmas } => cmd_population(common, prompts, sigmas.as_deref()),
        Command::Ablate { common, prompts } => cmd_ablate(common, prompts),
        Command::Train { common, algo, steps, resume } => cmd_train(common, (*algo).into(), *steps, *resume),
        Command::MemoryReport { common, batch, preset } => cmd_memory_report(common, *batch, *preset).map(|_| ()),
        Command::Eval { common, k, limit } => cmd_eval(common, *k, *limit),
    }
}
