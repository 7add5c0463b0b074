//! Autoregressive decoding with a KV cache.
//!
//! Several rows can decode in one batched forward. Every row owns its own
//! sampling stream, so a row's output does not depend on which other rows
//! share the batch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::model::{ModelRef, NormHook};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tokenizer::EOS;

/// Stream id reserved for token sampling.
const DECODE_STREAM: u64 = 0xDEC0DE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// 0 means greedy argmax.
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; 0 disables truncation.
    #[serde(default)]
    pub top_k: usize,
    pub max_new_tokens: usize,
    #[serde(default = "default_stop")]
    pub stop_token: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

fn default_stop() -> Option<u32> {
    Some(EOS)
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.0, top_k: 0, max_new_tokens: 64, stop_token: Some(EOS), seed: 0 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be finite and ≥ 0", self.temperature)));
        }
        Ok(())
    }
}

/// One decoded row.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// New tokens, including the stop token if one was produced.
    pub tokens: Vec<u32>,
    /// Log-probability of each new token under the decode distribution.
    /// For greedy decoding this is the untempered log-softmax.
    pub logprobs: Vec<f64>,
    pub stopped: bool,
}

impl Generation {
    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Decode distribution over one logit row: log-probabilities after
/// temperature and top-k truncation (`-inf` outside the kept set).
pub fn decode_log_probs<F: Scalar>(logits: &[F], temperature: f64, top_k: usize) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let mut z: Vec<f64> = logits.iter().map(|v| v.as_f64() / t).collect();
    if top_k > 0 && top_k < z.len() {
        let mut order: Vec<usize> = (0..z.len()).collect();
        // stable sort keeps lower ids first among equal logits
        order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &i in &order[top_k..] {
            z[i] = f64::NEG_INFINITY;
        }
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_token<F: Scalar>(logits: &[F], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> (u32, f64) {
    let lp = decode_log_probs(logits, cfg.temperature, cfg.top_k);
    if cfg.temperature == 0.0 {
        let i = argmax(logits);
        return (i as u32, lp[i]);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, l) in lp.iter().enumerate() {
        if l.is_finite() {
            acc += l.exp();
            last = i;
            if u < acc {
                return (i as u32, lp[i]);
            }
        }
    }
    // rounding left a sliver of mass uncovered
    (last as u32, lp[last])
}

/// Generates from one prompt.
pub fn generate<F: Scalar>(
    model: ModelRef<'_, F>,
    prompt: &[u32],
    cfg: &DecodeConfig,
    hooks: &mut dyn NormHook<F>,
) -> Result<Generation> {
    let mut out = generate_rows(model, prompt, cfg, &[cfg.seed], hooks)?;
    Ok(out.remove(0))
}

/// Decodes `decode_seeds.len()` rows from the same prompt in one batch.
/// Row `r` samples from its own stream seeded by `decode_seeds[r]`.
pub fn generate_rows<F: Scalar>(
    model: ModelRef<'_, F>,
    prompt: &[u32],
    cfg: &DecodeConfig,
    decode_seeds: &[u64],
    hooks: &mut dyn NormHook<F>,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must not be empty".into()));
    }
    let rows = decode_seeds.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mcfg = model.config();
    if prompt.len() > mcfg.max_seq_len {
        return Err(Error::Dimension(format!(
            "prompt of {} tokens exceeds max_seq_len {}",
            prompt.len(),
            mcfg.max_seq_len
        )));
    }
    let budget = cfg.max_new_tokens.min(mcfg.max_seq_len - prompt.len() + 1);
    let mut rngs: Vec<ChaCha8Rng> = decode_seeds.iter().map(|&s| stream(s, DECODE_STREAM)).collect();
    let mut out = vec![Generation { tokens: Vec::new(), logprobs: Vec::new(), stopped: false }; rows];
    if budget == 0 {
        return Ok(out);
    }
    let capacity = (prompt.len() + budget - 1).max(prompt.len());
    let mut cache = KvCache::new(mcfg.n_layers, rows, capacity, mcfg.d_model);
    let input: Vec<u32> = (0..rows).flat_map(|_| prompt.iter().copied()).collect();
    let mut logits = model.logits(&input, rows, Some(&mut cache), hooks)?;
    let v = mcfg.vocab_size;
    let mut t = prompt.len();
    for step in 0..budget {
        let mut next = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &logits.data()[(r * t + t - 1) * v..(r * t + t) * v];
            if !row.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite logits at decode step {step}")));
            }
            let g = &mut out[r];
            if g.stopped {
                next.push(cfg.stop_token.unwrap_or(EOS));
                continue;
            }
            let (tok, lp) = sample_token(row, cfg, &mut rngs[r]);
            g.tokens.push(tok);
            g.logprobs.push(lp);
            g.stopped = cfg.stop_token == Some(tok);
            next.push(tok);
        }
        if step + 1 == budget || out.iter().all(|g| g.stopped) {
            break;
        }
        logits = model.logits(&next, rows, Some(&mut cache), hooks)?;
        t = 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn decode_distribution_normalizes() {
        let lp = decode_log_probs(&[1.0f32, 2.0, 3.0, 0.5], 0.7, 2);
        let mass: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert_eq!(lp.iter().filter(|l| l.is_finite()).count(), 2);
    }
}
