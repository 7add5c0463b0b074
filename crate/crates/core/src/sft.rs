//! Supervised pretraining on task solutions, producing the base model that
//! reinforcement learning starts from.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, ModelRef, NoHooks, Trainable};
use crate::optim::{Adam, AdamConfig};
use crate::tasks::{Instance, TaskSpec};
use crate::tokenizer::PAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, lr: 3e-3, warmup: 20, seed: 0 }
    }
}

/// Right-padded token batch with next-token targets masked to response
/// positions.
pub struct SftBatch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

pub fn make_batch(instances: &[Instance]) -> SftBatch {
    let seqs: Vec<(Vec<u32>, usize)> = instances.iter().map(|i| i.training_tokens()).collect();
    let len = seqs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let rows = seqs.len();
    let mut tokens = vec![PAD; rows * len];
    let mut targets = vec![PAD; rows * len];
    let mut mask = vec![false; rows * len];
    for (r, (s, start)) in seqs.iter().enumerate() {
        tokens[r * len..r * len + s.len()].copy_from_slice(s);
        for t in start - 1..s.len() - 1 {
            targets[r * len + t] = s[t + 1];
            mask[r * len + t] = true;
        }
    }
    SftBatch { tokens, targets, mask, rows, len }
}

/// Mean response-token cross-entropy and its gradient for every base tensor.
pub fn loss_and_grads(params: &ModelParams<f32>, batch: &SftBatch) -> Result<(f64, Vec<Vec<f32>>)> {
    let model = ModelRef::new(params);
    let mut tape = Tape::new(true);
    let bound = model.bind(&mut tape, Trainable::Base);
    let out = forward(&mut tape, model.config(), &bound, &batch.tokens, batch.rows, None, &mut NoHooks)?;
    let loss = tape.cross_entropy(out.logits, &batch.targets, Some(&batch.mask))?;
    let g = tape.backward(loss)?;
    let grads = bound.base_vars().iter().map(|&v| g.get(v).map(|c| c.into_owned()).unwrap_or_default()).collect();
    Ok((tape.value(loss).data()[0] as f64, grads))
}

/// Linear warmup then cosine decay to 10% of the peak.
pub fn lr_scale(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let frac = ((step - warmup) as f64 / span as f64).min(1.0);
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Trains a fresh model on task solutions. `on_step(step, loss)` is called
/// after each update.
pub fn pretrain(
    model_cfg: &ModelConfig,
    task: &TaskSpec,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<ModelParams<f32>> {
    task.validate()?;
    if task.max_sequence_len() > model_cfg.max_seq_len {
        return Err(Error::Config(format!(
            "task sequences reach {} tokens but max_seq_len is {}",
            task.max_sequence_len(),
            model_cfg.max_seq_len
        )));
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() }, &sizes);
    let sampler_spec = TaskSpec { seed: task.seed ^ cfg.seed, ..task.clone() };
    let mut sample = sampler_spec.pretrain_sampler();
    for step in 0..cfg.steps {
        let instances: Vec<Instance> = (0..cfg.batch_size).map(|_| sample()).collect();
        let batch = make_batch(&instances);
        let (loss, grads) = loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("pretraining loss {loss}") });
        }
        let mut slots: Vec<&mut [f32]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        let g: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut slots, &g, lr_scale(step, cfg.warmup, cfg.steps));
        on_step(step, loss);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    #[test]
    fn batch_masks_only_response_targets() {
        let spec = TaskSpec { kind: TaskKind::ListMax { max_len: 3, max_value: 9 }, ..Default::default() };
        let inst = spec.train_set().remove(0);
        let b = make_batch(std::slice::from_ref(&inst));
        let (toks, start) = inst.training_tokens();
        assert_eq!(b.mask.iter().filter(|&&m| m).count(), toks.len() - start);
        assert_eq!(b.targets[start - 1], toks[start]);
    }

    #[test]
    fn short_pretraining_reduces_loss() {
        let cfg = ModelConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, max_seq_len: 64, ..Default::default() };
        let spec = TaskSpec { kind: TaskKind::ListMax { max_len: 3, max_value: 9 }, ..Default::default() };
        let mut losses = Vec::new();
        pretrain(&cfg, &spec, &PretrainConfig { steps: 40, batch_size: 8, lr: 3e-3, warmup: 5, seed: 1 }, |_, l| {
            losses.push(l)
        })
        .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
    }
}
