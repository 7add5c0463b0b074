//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test --release -p btrans-cli --test acceptance`,
//! or a subset by number: `... --test acceptance -- 7 8`. Criteria 7 to 10
//! share one supervised base model (default architecture, 4-digit addition,
//! 150 steps), trained once per process.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use btrans::autograd::Tape;
use btrans::bayes::{apply_bayesian_transform, memory_report, seven_b_config, NoiseMode, NoisePrior, SiteSelector};
use btrans::checkpoint::save_checkpoint;
use btrans::generate::DecodeConfig;
use btrans::gradcheck::finite_diff_check;
use btrans::lora::{LoraAdapter, LoraConfig};
use btrans::model::{forward, ModelConfig, ModelParams, ModelRef, NoHooks, Trainable};
use btrans::population::{aggregate_predictive, majority_vote, pass_at_k, pass_at_k_curve};
use btrans::rl::{grpo_advantages, train_loop, ttrl_rewards, TrainConfig, TrainMode};
use btrans::rng::derive_seed;
use btrans::sft::pretrain;
use btrans::tasks::TaskSpec;
use btrans_cli::commands::{load_prompts, run_ablation, run_population};
use btrans_cli::config::ExperimentConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Shared experiment settings; the base model is pretrained from these.
fn experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.pretrain.steps = 150;
    c
}

fn base() -> Arc<ModelParams<f32>> {
    static BASE: OnceLock<Arc<ModelParams<f32>>> = OnceLock::new();
    Arc::clone(BASE.get_or_init(|| {
        let c = experiment();
        let t = Instant::now();
        let p = pretrain(&c.model.config, &c.task, &c.pretrain, |_, _| {}).expect("pretraining");
        eprintln!("(shared base pretrained in {:.0}s)", t.elapsed().as_secs_f64());
        Arc::new(p)
    }))
}

/// Pseudo-random token strings plus real task prompts.
fn probe_prompts(n: usize) -> Vec<Vec<u32>> {
    let task = experiment().task;
    let mut out: Vec<Vec<u32>> = task.eval_set().iter().take(n / 2).map(|i| i.prompt_tokens()).collect();
    let mut i = 0u64;
    while out.len() < n {
        let len = 2 + (derive_seed(77, i) % 30) as usize;
        out.push((0..len).map(|j| (derive_seed(i, j as u64) % 32) as u32).collect());
        i += 1;
    }
    out
}

fn c1_sigma_zero_identity() -> Outcome {
    let base = base();
    let prompts = probe_prompts(100);
    let mut mismatches = 0;
    for mode in NoiseMode::ALL {
        let mut w = apply_bayesian_transform(Arc::clone(&base), NoisePrior::new(0.0, 0.0).unwrap(), &SiteSelector::All).unwrap();
        w.set_mode(mode);
        for (i, p) in prompts.iter().enumerate() {
            w.reset_posterior_seeded(&[i as u64]);
            let plain = ModelRef::new(&base).logits(p, 1, None, &mut NoHooks).unwrap();
            if !w.logits(None, p, 1).unwrap().bit_eq(&plain) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{} prompts x 3 modes, {mismatches} logit mismatches", prompts.len()))
}

fn c2_temporal_consistency() -> Outcome {
    let base = base();
    let prompt = experiment().task.eval_set()[0].prompt_tokens();
    let decode = DecodeConfig { temperature: 1.0, max_new_tokens: 24, stop_token: None, seed: 5, top_k: 0 };
    let mut w = apply_bayesian_transform(Arc::clone(&base), NoisePrior::new(0.0, 0.02).unwrap(), &SiteSelector::All).unwrap();
    let n_sites = w.sites().len();
    let mut problems = Vec::new();
    let mut summary = String::new();
    for mode in [NoiseMode::Sequence, NoiseMode::Token] {
        w.set_mode(mode);
        w.enable_trace();
        let draws_before = w.total_draws();
        let g = w.generate_members(None, &prompt, &decode, &[11], &[12]).unwrap();
        let trace = w.take_trace();
        let steps = trace.iter().map(|e| e.call).collect::<std::collections::BTreeSet<_>>().len();
        let draws = (w.total_draws() - draws_before) as usize;
        let mut by_site: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in &trace {
            by_site.entry(e.site).or_default().push(e);
        }
        if by_site.len() != n_sites || steps != g[0].tokens.len() {
            problems.push(format!("{mode:?}: {} sites traced, {steps} forward steps for {} tokens", by_site.len(), g[0].tokens.len()));
        }
        for (site, entries) in &by_site {
            let fresh = entries.iter().filter(|e| e.fresh).count();
            match mode {
                NoiseMode::Sequence => {
                    if fresh != 1 || entries.iter().any(|e| e.z != entries[0].z) {
                        problems.push(format!("sequence {site:?}: {fresh} draws or differing z"));
                    }
                }
                _ => {
                    let distinct = entries.windows(2).all(|p| p[0].z != p[1].z);
                    if fresh != steps || !distinct {
                        problems.push(format!("token {site:?}: {fresh} draws over {steps} steps"));
                    }
                }
            }
        }
        summary.push_str(&format!("{}: {draws} draws over {steps} steps x {n_sites} sites; ", mode.name()));
    }
    outcome(problems.is_empty(), if problems.is_empty() { summary } else { problems.join("; ") })
}

fn ce_loss(params: &ModelParams<f64>, adapter: Option<&LoraAdapter<f64>>, toks: &[u32], batch: usize, trainable: Trainable) -> (f64, Vec<Vec<f64>>) {
    let model = ModelRef::with_adapter(params, adapter);
    let mut tape = Tape::new(true);
    let bound = model.bind(&mut tape, trainable);
    let out = forward(&mut tape, model.config(), &bound, toks, batch, None, &mut NoHooks).unwrap();
    let t = toks.len() / batch;
    let targets: Vec<u32> = (0..batch * t).map(|r| if r % t + 1 < t { toks[r + 1] } else { 0 }).collect();
    let mask: Vec<bool> = (0..batch * t).map(|r| r % t + 1 < t).collect();
    let loss = tape.cross_entropy(out.logits, &targets, Some(&mask)).unwrap();
    let g = tape.backward(loss).unwrap();
    let vars = match trainable {
        Trainable::Adapter => bound.adapter_vars(),
        _ => bound.base_vars(),
    };
    (tape.value(loss).data()[0], vars.iter().map(|&v| g.get(v).unwrap().to_vec()).collect())
}

fn c3_gradient_check() -> Outcome {
    // the default toy architecture, with explicit norm biases so they are checked too
    let cfg = ModelConfig { norm_bias: true, ..ModelConfig::default() };
    let base = ModelParams::<f32>::init(&cfg, 21).unwrap().cast::<f64>();
    let toks: Vec<u32> = (0..24).map(|i| (derive_seed(3, i) % 32) as u32).collect();
    let groups: Vec<Vec<f64>> = base.named().iter().map(|(_, t)| t.data().to_vec()).collect();
    let with_base = |g: &[Vec<f64>]| {
        let mut p = base.clone();
        for (t, src) in p.tensors_mut().into_iter().zip(g) {
            t.data_mut().copy_from_slice(src);
        }
        ce_loss(&p, None, &toks, 2, Trainable::Base)
    };
    let full = finite_diff_check(|g| Ok(with_base(g).0), |g| Ok(with_base(g).1), &groups, 1e-5, 9).unwrap();

    let mut adapter = LoraAdapter::<f64>::new(&cfg, LoraConfig::default(), 4).unwrap();
    for t in adapter.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.03 * ((i % 5) as f64 - 2.0);
        }
    }
    let a_groups: Vec<Vec<f64>> = adapter.named().iter().map(|(_, t)| t.data().to_vec()).collect();
    let with_adapter = |g: &[Vec<f64>]| {
        let mut a = adapter.clone();
        for (t, src) in a.tensors_mut().into_iter().zip(g) {
            t.data_mut().copy_from_slice(src);
        }
        ce_loss(&base, Some(&a), &toks, 2, Trainable::Adapter)
    };
    let lora = finite_diff_check(|g| Ok(with_adapter(g).0), |g| Ok(with_adapter(g).1), &a_groups, 1e-5, 10).unwrap();
    let worst = full.max_rel_error.max(lora.max_rel_error);
    outcome(
        worst <= 1e-4,
        format!(
            "max rel error {worst:.2e} (base {:.2e} over {} coords, adapter {:.2e} over {}), tolerance 1e-4",
            full.max_rel_error, full.coords_checked, lora.max_rel_error, lora.coords_checked
        ),
    )
}

fn c4_noise_statistics() -> Outcome {
    let sigma = 0.02;
    let mut w = apply_bayesian_transform(base(), NoisePrior::new(0.0, sigma).unwrap(), &SiteSelector::All).unwrap();
    w.set_mode(NoiseMode::Token);
    w.reset_posterior_seeded(&[2024]);
    let sites = w.sites();
    let mut xs: Vec<f64> = Vec::with_capacity(100_000);
    let mut i = 0;
    while xs.len() < 100_000 {
        let z = w.sample_offset(sites[i % sites.len()], 1).unwrap();
        xs.extend(z.data().iter().map(|&v| v as f64));
        i += 1;
    }
    xs.truncate(100_000);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mean_bound = 3.0 * sigma / n.sqrt();
    let rel = (sd / sigma - 1.0).abs();
    outcome(
        mean.abs() < mean_bound && rel < 0.02,
        format!("N={n}, mean {mean:.2e} (bound {mean_bound:.2e}), std {sd:.5} ({:.2}% from sigma)", rel * 100.0),
    )
}

/// Independent oracle: for every prefix length, scan the whole prefix.
fn pass_oracle(bits: &[Vec<bool>], k: usize) -> f64 {
    let mut hits = 0;
    for row in bits {
        let mut any = false;
        for b in row.iter().take(k) {
            if *b {
                any = true;
            }
        }
        hits += any as usize;
    }
    hits as f64 / bits.len() as f64
}

fn c5_pass_at_k() -> Outcome {
    let mut mismatches = 0;
    let mut non_monotone = 0;
    let mut check = |bits: &[Vec<bool>]| {
        let curve = pass_at_k_curve(bits).unwrap();
        for (j, v) in curve.iter().enumerate() {
            if *v != pass_oracle(bits, j + 1) || *v != pass_at_k(bits, j + 1).unwrap() {
                mismatches += 1;
            }
        }
        for row in bits {
            let c = pass_at_k_curve(std::slice::from_ref(row)).unwrap();
            non_monotone += c.windows(2).filter(|w| w[0] > w[1]).count();
        }
    };
    for i in 0..1000u64 {
        let q = 1 + (derive_seed(i, 0) % 6) as usize;
        let k = 1 + (derive_seed(i, 1) % 10) as usize;
        let bits: Vec<Vec<bool>> =
            (0..q).map(|a| (0..k).map(|b| derive_seed(i, (2 + a * 16 + b) as u64) % 3 == 0).collect()).collect();
        check(&bits);
    }
    // bitmaps stored by an actual population run
    let mut cfg = experiment();
    cfg.population.k = 8;
    cfg.population.limit = Some(10);
    cfg.noise.sigma = 0.05;
    let prompts = load_prompts(&cfg, None).unwrap();
    let report = run_population(&base(), None, &cfg, &prompts, 1).unwrap();
    let stored: Vec<Vec<bool>> = report
        .results
        .iter()
        .zip(&prompts)
        .map(|(r, p)| r.members.iter().map(|m| m.answer == p.answer).collect())
        .collect();
    check(&stored);
    for (r, bits) in report.results.iter().zip(&stored) {
        let expected: Vec<f64> = (1..=bits.len()).map(|k| pass_oracle(std::slice::from_ref(bits), k)).collect();
        if r.pass_at_k.as_ref() != Some(&expected) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && non_monotone == 0,
        format!("1000 random + {} stored bitmaps: {mismatches} mismatches, {non_monotone} decreases", stored.len()),
    )
}

/// Brute-force vote: count by rescanning, break ties by earliest occurrence.
fn vote_oracle(answers: &[Option<String>]) -> Option<String> {
    let mut best: Option<(usize, usize, String)> = None;
    for (i, a) in answers.iter().enumerate() {
        let Some(a) = a else { continue };
        if answers[..i].iter().any(|b| b.as_ref() == Some(a)) {
            continue;
        }
        let count = answers.iter().filter(|b| b.as_ref() == Some(a)).count();
        if best.as_ref().map_or(true, |(c, _, _)| count > *c) {
            best = Some((count, i, a.clone()));
        }
    }
    best.map(|(_, _, a)| a)
}

fn c6_aggregation_oracles() -> Outcome {
    let mut bad: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..1000u64 {
        let g = 2 + (derive_seed(i, 0) % 9) as usize;
        let answers: Vec<Option<String>> = (0..g)
            .map(|j| {
                let r = derive_seed(i, 10 + j as u64) % 5;
                (r < 4).then(|| r.to_string())
            })
            .collect();
        let v = majority_vote(&answers);
        let counts_ok = v.counts.iter().all(|(a, c)| answers.iter().filter(|b| b.as_deref() == Some(a)).count() == *c);
        if v.consensus != vote_oracle(&answers) || !counts_ok {
            *bad.entry("majority_vote").or_default() += 1;
        }
        let consensus = vote_oracle(&answers);
        let want: Vec<f64> = answers.iter().map(|a| (a.is_some() && *a == consensus) as u8 as f64).collect();
        if ttrl_rewards(&answers) != want {
            *bad.entry("ttrl_rewards").or_default() += 1;
        }

        let rewards: Vec<f64> = (0..g).map(|j| (derive_seed(i, 100 + j as u64) % 1000) as f64 / 999.0).collect();
        let mut total = 0.0;
        for r in &rewards {
            total += r;
        }
        let m = total / g as f64;
        let mut ss = 0.0;
        for r in &rewards {
            ss += (r - m) * (r - m);
        }
        let sd = (ss / g as f64).sqrt();
        let adv = grpo_advantages(&rewards);
        if adv.iter().zip(&rewards).any(|(a, r)| (a - (r - m) / (sd + 1e-4)).abs() > 1e-6) {
            *bad.entry("grpo_advantages").or_default() += 1;
        }

        let vocab = 2 + (derive_seed(i, 200) % 6) as usize;
        let dists: Vec<Vec<f64>> = (0..g)
            .map(|j| {
                let raw: Vec<f64> = (0..vocab).map(|t| 1.0 + (derive_seed(i, (300 + j * 10 + t) as u64) % 100) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            })
            .collect();
        let agg = aggregate_predictive(&dists).unwrap();
        for t in 0..vocab {
            let mut s = 0.0;
            for d in &dists {
                s += d[t];
            }
            if (agg[t] - s / g as f64).abs() > 1e-6 {
                *bad.entry("aggregate_predictive").or_default() += 1;
                break;
            }
        }
    }
    let total: usize = bad.values().sum();
    outcome(total == 0, if total == 0 { "1000 instances per function, all match".to_string() } else { format!("mismatches: {bad:?}") })
}

fn c7_diversity_monotone() -> Outcome {
    let mut cfg = experiment();
    cfg.decode.temperature = 0.0;
    cfg.population.k = 8;
    cfg.population.limit = Some(20);
    cfg.population.sigmas = vec![0.0, 0.01, 0.02, 0.05];
    let prompts = load_prompts(&cfg, None).unwrap();
    let report = run_population(&base(), None, &cfg, &prompts, 1).unwrap();
    let d: Vec<f64> = report.summaries.iter().map(|s| s.diversity.unwrap()).collect();
    let monotone = d.windows(2).all(|w| w[0] <= w[1]);
    let detail = cfg.population.sigmas.iter().zip(&d).map(|(s, v)| format!("sigma {s}: {v:.6}")).collect::<Vec<_>>().join(", ");
    outcome(monotone && d[0] == 0.0, format!("{} prompts, K=8, T=0; {detail}", prompts.len()))
}

fn c8_ablation_ordering() -> Outcome {
    let mut cfg = experiment();
    cfg.decode.temperature = 0.0;
    cfg.noise.sigma = 0.02;
    cfg.population.k = 8;
    cfg.population.limit = Some(20);
    let prompts = load_prompts(&cfg, None).unwrap();
    let rows = run_ablation(&base(), None, &cfg, &prompts, 1).unwrap();
    let row = |m: NoiseMode| rows.iter().find(|r| r.mode == m).unwrap();
    let (seq, tok) = (row(NoiseMode::Sequence), row(NoiseMode::Token));
    let (ss, ts) = (seq.scs_mean.unwrap(), tok.scs_mean.unwrap());
    let (sa, ta) = (seq.accuracy.unwrap(), tok.accuracy.unwrap());
    outcome(
        seq.generations >= 50 && ss > ts && sa >= ta,
        format!("{} generations per mode; SCS sequence {ss:.4} vs token {ts:.4}; accuracy {sa:.3} vs {ta:.3}", seq.generations),
    )
}

/// Paired RL settings; only σ and the seed vary.
fn rl_config(sigma: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 100,
        eval_interval: 25,
        eval_prompts: Some(40),
        lr: 4e-3,
        reward_threshold: 0.35,
        sigma,
        seed,
        ..TrainConfig::default()
    }
}

fn c9_rlvr_exploration() -> Outcome {
    let task: TaskSpec = experiment().task;
    let mut wins = 0;
    let (mut final_b, mut final_0) = (0.0, 0.0);
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let bayes = train_loop(base(), &task, &rl_config(0.02, seed), TrainMode::Rlvr, None).unwrap();
        let plain = train_loop(base(), &task, &rl_config(0.0, seed), TrainMode::Rlvr, None).unwrap();
        let win = match (bayes.steps_to_threshold, plain.steps_to_threshold) {
            (Some(b), Some(p)) => b <= p,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        let fb = bayes.records.last().unwrap().pass_at_1.unwrap();
        let f0 = plain.records.last().unwrap().pass_at_1.unwrap();
        final_b += fb / 5.0;
        final_0 += f0 / 5.0;
        lines.push(format!("seed {seed}: steps {:?} vs {:?}", bayes.steps_to_threshold, plain.steps_to_threshold));
    }
    outcome(
        wins >= 3 && final_b >= final_0,
        format!("{wins}/5 seeds no slower to reward 0.35; final pass@1 {final_b:.3} vs {final_0:.3}; {}", lines.join(", ")),
    )
}

fn c10_ttrl_signal() -> Outcome {
    let task: TaskSpec = experiment().task;
    let mut improved = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let run = train_loop(base(), &task, &rl_config(0.02, seed), TrainMode::Ttrl, None).unwrap();
        let start = run.records[0].mean_accuracy.unwrap();
        let end = run.records.last().unwrap().mean_accuracy.unwrap();
        improved += (end > start) as usize;
        lines.push(format!("{start:.3}->{end:.3}"));
    }
    outcome(improved >= 3, format!("{improved}/5 seeds improved true accuracy over 100 label-free steps: {}", lines.join(", ")))
}

fn c11_memory_accounting() -> Outcome {
    let mut mismatches = Vec::new();
    let mut w = apply_bayesian_transform(base(), NoisePrior::new(0.0, 0.02).unwrap(), &SiteSelector::All).unwrap();
    for b in 1..=4usize {
        let seeds: Vec<u64> = (0..b as u64).collect();
        w.reset_posterior_seeded(&seeds);
        let toks: Vec<u32> = (0..b).flat_map(|_| [1u32, 5, 7, 9]).collect();
        w.logits(None, &toks, b).unwrap();
        if w.allocated_cache_bytes() != w.noise_cache_bytes(b) {
            mismatches.push(format!("B={b}: {} vs {}", w.allocated_cache_bytes(), w.noise_cache_bytes(b)));
        }
    }
    let big = memory_report(&seven_b_config(), &SiteSelector::All, 1).unwrap();
    let mb = big.noise_cache_bytes as f64 / 1e6;
    let gb = big.mask_cache_bytes as f64 / 1e9;
    let ok = mismatches.is_empty() && (0.5..2.0).contains(&mb) && gb > 1.0;
    outcome(ok, format!("measured = reported for B=1..4 {mismatches:?}; 7B-class: noise {mb:.2} MB vs masks {gb:.1} GB"))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walk(dir) {
        out.insert(e.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&e).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

fn c12_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("base.btrn");
    save_checkpoint(&base(), &ckpt).unwrap();
    let mut cfg = experiment();
    cfg.model.checkpoint = Some(ckpt);
    cfg.train.steps = 3;
    cfg.train.batch_prompts = 2;
    cfg.train.group_size = 4;
    cfg.train.eval_interval = 2;
    cfg.train.eval_prompts = Some(4);
    let cfg_path = tmp.path().join("exp.json");
    std::fs::write(&cfg_path, cfg.to_pretty_json()).unwrap();
    let c = cfg_path.to_str().unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["population", "--config", c, "--sigmas", "0,0.02", "--k", "4", "--limit", "5", "--jobs", "2"],
        vec!["ablate", "--config", c, "--k", "3", "--limit", "4"],
        vec!["generate", "--config", c, "--prompt", "12+34", "--noise-seed", "9"],
        vec!["eval", "--config", c, "--k", "3", "--limit", "4"],
        vec!["train", "--config", c],
        vec!["train", "--config", c, "--algo", "ttrl"],
        vec!["memory-report", "--config", c],
    ];
    let out = tmp.path().join("run");
    let mut differing = Vec::new();
    let mut files = 0;
    for args in &runs {
        let mut snapshots = Vec::new();
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            let o = Command::new(env!("CARGO_BIN_EXE_btrans")).args(args).arg("--out").arg(&out).output().unwrap();
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
            let mut tree = read_tree(&out);
            tree.insert("<stdout>".into(), o.stdout);
            snapshots.push(tree);
        }
        files += snapshots[0].len();
        if snapshots[0] != snapshots[1] {
            let names: Vec<&String> =
                snapshots[0].keys().filter(|k| snapshots[0].get(*k) != snapshots[1].get(*k)).collect();
            differing.push(format!("{}: {names:?}", args[0]));
        }
    }
    outcome(
        differing.is_empty(),
        format!("{} commands run twice, {files} artifacts compared byte for byte; differing: {differing:?}", runs.len()),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "sigma=0 identity", c1_sigma_zero_identity),
        (2, "temporal consistency", c2_temporal_consistency),
        (3, "gradient correctness", c3_gradient_check),
        (4, "noise statistics", c4_noise_statistics),
        (5, "pass@k oracle and monotonicity", c5_pass_at_k),
        (6, "aggregation oracles", c6_aggregation_oracles),
        (7, "diversity monotone in sigma", c7_diversity_monotone),
        (8, "ablation ordering", c8_ablation_ordering),
        (9, "RLVR exploration benefit", c9_rlvr_exploration),
        (10, "TTRL signal validity", c10_ttrl_signal),
        (11, "memory accounting", c11_memory_accounting),
        (12, "reproducibility", c12_reproducibility),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += (!o.pass) as usize;
        println!(
            "criterion {n:>2} {} {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
