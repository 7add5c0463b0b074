//! Populations of sampled model instances and their aggregation.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::bayes::{NoiseMode, WrappedModel};
use crate::error::{Error, Result};
use crate::generate::DecodeConfig;
use crate::lora::LoraAdapter;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tokenizer;

/// Seed for member `k`: one SplitMix64 round over `base ^ k`.
pub fn member_seed(base: u64, k: usize) -> u64 {
    derive_seed(base, k as u64)
}

/// Final-answer grammar: `= <integer>`, last occurrence wins.
#[derive(Clone, Debug)]
pub struct AnswerGrammar {
    re: Regex,
}

impl Default for AnswerGrammar {
    fn default() -> Self {
        Self { re: Regex::new(r"=\s*([+-]?\d+)").expect("static pattern") }
    }
}

impl AnswerGrammar {
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern).map_err(|e| Error::Config(format!("answer pattern: {e}")))?;
        if re.captures_len() < 2 {
            return Err(Error::Config("answer pattern needs a capture group".into()));
        }
        Ok(Self { re })
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        let caps = self.re.captures_iter(text).last()?;
        Some(canonicalize(caps.get(1)?.as_str()))
    }
}

/// Strips a `+` sign and leading zeros; `-0` becomes `0`.
pub fn canonicalize(raw: &str) -> String {
    let (neg, digits) = match raw.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, raw.strip_prefix('+').unwrap_or(raw)),
    };
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        "0".into()
    } else if neg {
        format!("-{trimmed}")
    } else {
        trimmed.into()
    }
}

/// [`AnswerGrammar::extract`] with the default grammar.
pub fn extract_answer(text: &str) -> Option<String> {
    static GRAMMAR: OnceLock<AnswerGrammar> = OnceLock::new();
    GRAMMAR.get_or_init(AnswerGrammar::default).extract(text)
}

/// One population member's generation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemberRecord {
    pub k: usize,
    pub noise_seed: u64,
    pub decode_seed: u64,
    #[serde(skip)]
    pub tokens: Vec<u32>,
    pub text: String,
    pub answer: Option<String>,
    #[serde(skip)]
    pub logprobs: Vec<f64>,
    pub logprob_sum: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Outcome of a majority vote.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Vote {
    /// `None` when no member produced an answer.
    pub consensus: Option<String>,
    pub counts: BTreeMap<String, usize>,
}

/// Most frequent answer; ties go to the answer first produced by the
/// lowest-indexed member.
pub fn majority_vote(answers: &[Option<String>]) -> Vote {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, a) in answers.iter().enumerate() {
        if let Some(a) = a {
            *counts.entry(a.clone()).or_default() += 1;
            first.entry(a.as_str()).or_insert(i);
        }
    }
    let consensus = counts
        .iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then(first[b.as_str()].cmp(&first[a.as_str()])))
        .map(|(a, _)| a.clone());
    Vote { consensus, counts }
}

/// Mean over questions of "any of the first `k` members is correct".
pub fn pass_at_k(correct: &[Vec<bool>], k: usize) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Contract("pass@k over an empty question set".into()));
    }
    let mut hits = 0usize;
    for row in correct {
        if k == 0 || k > row.len() {
            return Err(Error::Index(format!("k = {k} outside 1..={}", row.len())));
        }
        hits += row[..k].iter().any(|&c| c) as usize;
    }
    Ok(hits as f64 / correct.len() as f64)
}

/// `pass_at_k` for every `k = 1..=K`.
pub fn pass_at_k_curve(correct: &[Vec<bool>]) -> Result<Vec<f64>> {
    let kmax = correct.iter().map(|r| r.len()).min().unwrap_or(0);
    (1..=kmax).map(|k| pass_at_k(correct, k)).collect()
}

/// Uniform average of member next-token distributions.
pub fn aggregate_predictive(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists.first().ok_or_else(|| Error::Contract("no distributions".into()))?;
    let v = first.len();
    let mut out = vec![0.0; v];
    for (i, d) in dists.iter().enumerate() {
        if d.len() != v {
            return Err(Error::Dimension(format!("distribution {i} has {} entries, expected {v}", d.len())));
        }
        let mass: f64 = d.iter().sum();
        if (mass - 1.0).abs() > 1e-6 || d.iter().any(|p| *p < 0.0) {
            return Err(Error::Contract(format!("distribution {i} sums to {mass}")));
        }
        out.iter_mut().zip(d).for_each(|(o, p)| *o += p);
    }
    let k = dists.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Run members as batch rows or one at a time with a reset between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Batched,
    Sequential,
}

fn record(k: usize, noise_seed: u64, decode_seed: u64, g: crate::generate::Generation) -> MemberRecord {
    let text = tokenizer::decode(&g.tokens);
    MemberRecord {
        k,
        noise_seed,
        decode_seed,
        answer: extract_answer(&text),
        text,
        logprob_sum: g.logprob_sum(),
        tokens: g.tokens,
        logprobs: g.logprobs,
        error: None,
    }
}

fn failed(k: usize, noise_seed: u64, decode_seed: u64, e: &Error) -> MemberRecord {
    MemberRecord {
        k,
        noise_seed,
        decode_seed,
        tokens: Vec::new(),
        text: String::new(),
        answer: None,
        logprobs: Vec::new(),
        logprob_sum: 0.0,
        error: Some(e.to_string()),
    }
}

/// Generates `k_members` instances. Member `k` uses noise seed
/// `member_seed(base_seed, k)` and decode seed `member_seed(decode.seed, k)`.
/// Generation failures are recorded on the member rather than returned.
pub fn sample_population<F: Scalar>(
    wrapped: &mut WrappedModel<F>,
    adapter: Option<&LoraAdapter<F>>,
    prompt: &[u32],
    k_members: usize,
    decode: &DecodeConfig,
    base_seed: u64,
    schedule: Schedule,
) -> Result<Vec<MemberRecord>> {
    if k_members == 0 {
        return Err(Error::Contract("population needs K ≥ 1".into()));
    }
    let noise: Vec<u64> = (0..k_members).map(|k| member_seed(base_seed, k)).collect();
    let dec: Vec<u64> = (0..k_members).map(|k| member_seed(decode.seed, k)).collect();
    match schedule {
        Schedule::Batched => Ok(match wrapped.generate_members(adapter, prompt, decode, &noise, &dec) {
            Ok(gens) => gens.into_iter().enumerate().map(|(k, g)| record(k, noise[k], dec[k], g)).collect(),
            Err(e) => (0..k_members).map(|k| failed(k, noise[k], dec[k], &e)).collect(),
        }),
        Schedule::Sequential => Ok((0..k_members)
            .map(|k| match wrapped.generate_members(adapter, prompt, decode, &noise[k..=k], &dec[k..=k]) {
                Ok(mut g) => record(k, noise[k], dec[k], g.remove(0)),
                Err(e) => failed(k, noise[k], dec[k], &e),
            })
            .collect()),
    }
}

/// Next-token distribution of each member after `prefix` (sequence mode).
pub fn member_next_token_distributions<F: Scalar>(
    wrapped: &mut WrappedModel<F>,
    adapter: Option<&LoraAdapter<F>>,
    prefix: &[u32],
    noise_seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if prefix.is_empty() || noise_seeds.is_empty() {
        return Err(Error::Contract("need a non-empty prefix and at least one member".into()));
    }
    let mode = wrapped.mode();
    wrapped.set_mode(NoiseMode::Sequence);
    wrapped.reset_posterior_seeded(noise_seeds);
    let rows = noise_seeds.len();
    let input: Vec<u32> = (0..rows).flat_map(|_| prefix.iter().copied()).collect();
    let logits = wrapped.logits(adapter, &input, rows);
    wrapped.set_mode(mode);
    let logits = logits?;
    let (t, v) = (prefix.len(), logits.cols());
    Ok((0..rows)
        .map(|r| {
            let row = &logits.data()[((r + 1) * t - 1) * v..(r + 1) * t * v];
            crate::generate::decode_log_probs(row, 1.0, 0).iter().map(|l| l.exp()).collect()
        })
        .collect())
}

/// Aggregated view of one prompt's population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationResult {
    pub prompt_id: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    pub members: Vec<MemberRecord>,
    pub consensus: Option<String>,
    pub votes: BTreeMap<String, usize>,
    /// Present when a ground-truth answer was supplied.
    pub pass_at_k: Option<Vec<f64>>,
    pub diversity: Option<f64>,
}

impl PopulationResult {
    pub fn new(prompt_id: usize, sigma: f64, members: Vec<MemberRecord>, truth: Option<&str>, diversity: Option<f64>) -> Self {
        let answers: Vec<Option<String>> = members.iter().map(|m| m.answer.clone()).collect();
        let vote = majority_vote(&answers);
        let pass_at_k = truth.map(|t| {
            let bits: Vec<bool> = answers.iter().map(|a| a.as_deref() == Some(t)).collect();
            pass_at_k_curve(&[bits]).expect("members non-empty")
        });
        Self {
            prompt_id,
            k: members.len(),
            sigma,
            members,
            consensus: vote.consensus,
            votes: vote.counts,
            pass_at_k,
            diversity,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}
