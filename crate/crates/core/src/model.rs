//! Decoder-only transformer with pre-norm RMSNorm blocks, rotary positions,
//! SwiGLU feed-forward layers and an untied output head.
//!
//! The forward pass is written once against [`Tape`]; inference runs the
//! same code on an untraced tape. Every normalization site calls a
//! [`NormHook`], which is where stochastic offsets attach.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::lora::LoraAdapter;
use crate::rng::{fill_standard_normal, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Whether norms carry an explicit (trainable) bias vector.
    #[serde(default)]
    pub norm_bias: bool,
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_rope_base() -> f64 {
    10000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            norm_eps: default_norm_eps(),
            rope_base: default_rope_base(),
            norm_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("head dim {} must be even for rotary encoding", self.head_dim())));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Wrappable normalization sites: two per block plus the final norm.
    pub fn norm_sites(&self) -> Vec<NormSite> {
        let mut sites = Vec::with_capacity(2 * self.n_layers + 1);
        for l in 0..self.n_layers {
            sites.push(NormSite::Attn(l));
            sites.push(NormSite::Mlp(l));
        }
        sites.push(NormSite::Final);
        sites
    }

    /// Number of parameters implied by the config.
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let norm = if self.norm_bias { 2 * d } else { d };
        let block = 4 * d * d + 3 * d * self.d_ff + 2 * norm;
        2 * self.vocab_size * d + self.n_layers * block + norm
    }

    /// Parameters that live in weight matrices (everything except norm vectors).
    pub fn num_matrix_params(&self) -> usize {
        let d = self.d_model;
        2 * self.vocab_size * d + self.n_layers * (4 * d * d + 3 * d * self.d_ff)
    }
}

/// A normalization layer position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NormSite {
    /// Pre-attention norm of block `l`.
    Attn(usize),
    /// Pre-MLP norm of block `l`.
    Mlp(usize),
    /// Norm before the output head.
    Final,
}

impl NormSite {
    pub fn index(self, n_layers: usize) -> usize {
        match self {
            NormSite::Attn(l) => 2 * l,
            NormSite::Mlp(l) => 2 * l + 1,
            NormSite::Final => 2 * n_layers,
        }
    }

    pub fn name(self) -> String {
        match self {
            NormSite::Attn(l) => format!("layers.{l}.attn_norm"),
            NormSite::Mlp(l) => format!("layers.{l}.mlp_norm"),
            NormSite::Final => "final_norm".into(),
        }
    }
}

/// Receives each normalization output and may return a constant offset of
/// shape `[batch, d_model]` to add along the time axis.
pub trait NormHook<F: Scalar> {
    fn offset(&mut self, site: NormSite, batch: usize, d_model: usize) -> Result<Option<Tensor<F>>>;
}

/// The identity hook.
pub struct NoHooks;

impl<F: Scalar> NormHook<F> for NoHooks {
    fn offset(&mut self, _: NormSite, _: usize, _: usize) -> Result<Option<Tensor<F>>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub attn_norm: NormParams<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub mlp_norm: NormParams<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

/// Full parameter set. Linear weights are stored `[d_out × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: NormParams<F>,
    pub head: Tensor<F>,
}

fn gaussian<F: Scalar>(shape: Vec<usize>, std: f64, seed: u64, id: u64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0.0; n];
    fill_standard_normal(&mut stream(seed, id), &mut buf);
    buf.iter_mut().for_each(|v| *v *= std);
    Tensor::from_f64(shape, &buf).expect("shape matches buffer")
}

impl<F: Scalar> ModelParams<F> {
    /// Scaled Gaussian initialization; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let mut id = 0u64;
        let mut next = || {
            id += 1;
            id
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let norm = |d: usize| NormParams {
            weight: Tensor::full(vec![d], F::one()),
            bias: config.norm_bias.then(|| Tensor::zeros(vec![d])),
        };
        let tok_embed = gaussian(vec![config.vocab_size, d], 1.0, seed, next());
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                attn_norm: norm(d),
                wq: gaussian(vec![d, d], proj_std, seed, next()),
                wk: gaussian(vec![d, d], proj_std, seed, next()),
                wv: gaussian(vec![d, d], proj_std, seed, next()),
                wo: gaussian(vec![d, d], out_std, seed, next()),
                mlp_norm: norm(d),
                w_gate: gaussian(vec![ff, d], proj_std, seed, next()),
                w_up: gaussian(vec![ff, d], proj_std, seed, next()),
                w_down: gaussian(vec![d, ff], out_std / (ff as f64 / d as f64).sqrt(), seed, next()),
            })
            .collect();
        let head = gaussian(vec![config.vocab_size, d], proj_std, seed, next());
        Ok(Self {
            config: config.clone(),
            tok_embed,
            blocks,
            final_norm: norm(d),
            head,
        })
    }

    /// `(name, tensor)` pairs in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("tok_embed".to_string(), &self.tok_embed)];
        fn push_norm<'p, F>(out: &mut Vec<(String, &'p Tensor<F>)>, prefix: String, n: &'p NormParams<F>) {
            out.push((format!("{prefix}.weight"), &n.weight));
            if let Some(b) = &n.bias {
                out.push((format!("{prefix}.bias"), b));
            }
        }
        for (l, b) in self.blocks.iter().enumerate() {
            push_norm(&mut out, format!("layers.{l}.attn_norm"), &b.attn_norm);
            out.push((format!("layers.{l}.attn.wq"), &b.wq));
            out.push((format!("layers.{l}.attn.wk"), &b.wk));
            out.push((format!("layers.{l}.attn.wv"), &b.wv));
            out.push((format!("layers.{l}.attn.wo"), &b.wo));
            push_norm(&mut out, format!("layers.{l}.mlp_norm"), &b.mlp_norm);
            out.push((format!("layers.{l}.mlp.w_gate"), &b.w_gate));
            out.push((format!("layers.{l}.mlp.w_up"), &b.w_up));
            out.push((format!("layers.{l}.mlp.w_down"), &b.w_down));
        }
        push_norm(&mut out, "final_norm".into(), &self.final_norm);
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_embed];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm.weight);
            if let Some(x) = &mut b.attn_norm.bias {
                out.push(x);
            }
            out.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo]);
            out.push(&mut b.mlp_norm.weight);
            if let Some(x) = &mut b.mlp_norm.bias {
                out.push(x);
            }
            out.extend([&mut b.w_gate, &mut b.w_up, &mut b.w_down]);
        }
        out.push(&mut self.final_norm.weight);
        if let Some(x) = &mut self.final_norm.bias {
            out.push(x);
        }
        out.push(&mut self.head);
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(config: &ModelConfig, mut tensors: std::collections::BTreeMap<String, Tensor<F>>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let names: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), slot) in names.into_iter().zip(params.tensors_mut()) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Hash of names, shapes and raw bits of every tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let norm = |n: &NormParams<F>| NormParams { weight: n.weight.cast(), bias: n.bias.as_ref().map(|b| b.cast()) };
        ModelParams {
            config: self.config.clone(),
            tok_embed: self.tok_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn_norm: norm(&b.attn_norm),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    mlp_norm: norm(&b.mlp_norm),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            head: self.head.cast(),
        }
    }
}

/// Which parameters become trainable leaves when bound to a traced tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter,
}

#[derive(Clone, Debug)]
pub struct BoundNorm {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub attn_norm: BoundNorm,
    /// q, k, v, o
    pub proj: [Var; 4],
    pub mlp_norm: BoundNorm,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub tok_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_norm: BoundNorm,
    pub head: Var,
    /// Per layer, per projection: `(A, B)` adapter vars.
    pub lora: Vec<[Option<(Var, Var)>; 4]>,
    pub lora_scale: f64,
}

impl BoundModel {
    /// Base-parameter vars in [`ModelParams::named`] order.
    pub fn base_vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embed];
        let norm = |out: &mut Vec<Var>, n: &BoundNorm| {
            out.push(n.weight);
            out.extend(n.bias);
        };
        for b in &self.blocks {
            norm(&mut out, &b.attn_norm);
            out.extend(b.proj);
            norm(&mut out, &b.mlp_norm);
            out.extend([b.w_gate, b.w_up, b.w_down]);
        }
        norm(&mut out, &self.final_norm);
        out.push(self.head);
        out
    }

    /// Adapter vars in [`LoraAdapter::named`] order.
    pub fn adapter_vars(&self) -> Vec<Var> {
        self.lora
            .iter()
            .flat_map(|slots| slots.iter().flatten().flat_map(|&(a, b)| [a, b]))
            .collect()
    }
}

/// Model weights plus an optional adapter.
#[derive(Clone, Copy)]
pub struct ModelRef<'m, F: Scalar> {
    pub params: &'m ModelParams<F>,
    pub adapter: Option<&'m LoraAdapter<F>>,
}

impl<'m, F: Scalar> ModelRef<'m, F> {
    pub fn new(params: &'m ModelParams<F>) -> Self {
        Self { params, adapter: None }
    }

    pub fn with_adapter(params: &'m ModelParams<F>, adapter: Option<&'m LoraAdapter<F>>) -> Self {
        Self { params, adapter }
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.params.config
    }

    pub fn bind(&self, tape: &mut Tape<'m, F>, trainable: Trainable) -> BoundModel {
        let base = trainable == Trainable::Base;
        let leaf = |tape: &mut Tape<'m, F>, t: &'m Tensor<F>, train: bool| {
            if train {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let norm = |tape: &mut Tape<'m, F>, n: &'m NormParams<F>| BoundNorm {
            weight: leaf(tape, &n.weight, base),
            bias: n.bias.as_ref().map(|b| leaf(tape, b, base)),
        };
        let p = self.params;
        let tok_embed = leaf(tape, &p.tok_embed, base);
        let blocks = p
            .blocks
            .iter()
            .map(|b| BoundBlock {
                attn_norm: norm(tape, &b.attn_norm),
                proj: [
                    leaf(tape, &b.wq, base),
                    leaf(tape, &b.wk, base),
                    leaf(tape, &b.wv, base),
                    leaf(tape, &b.wo, base),
                ],
                mlp_norm: norm(tape, &b.mlp_norm),
                w_gate: leaf(tape, &b.w_gate, base),
                w_up: leaf(tape, &b.w_up, base),
                w_down: leaf(tape, &b.w_down, base),
            })
            .collect();
        let final_norm = norm(tape, &p.final_norm);
        let head = leaf(tape, &p.head, base);
        let train_adapter = trainable == Trainable::Adapter;
        let (lora, lora_scale) = match self.adapter {
            Some(ad) => {
                let lora = ad
                    .layers
                    .iter()
                    .map(|slots| {
                        let mut out: [Option<(Var, Var)>; 4] = [None; 4];
                        for (i, pair) in slots.iter().enumerate() {
                            if let Some(pair) = pair {
                                let a = leaf(tape, &pair.a, train_adapter);
                                let b = leaf(tape, &pair.b, train_adapter);
                                out[i] = Some((a, b));
                            }
                        }
                        out
                    })
                    .collect();
                (lora, ad.scaling().as_f64())
            }
            None => (vec![[None; 4]; p.blocks.len()], 0.0),
        };
        BoundModel { tok_embed, blocks, final_norm, head, lora, lora_scale }
    }

    /// Untraced logits `[B, T, V]` for `tokens` laid out row-major `[B, T]`.
    pub fn logits(&self, tokens: &[u32], batch: usize, cache: Option<&mut KvCache<F>>, hooks: &mut dyn NormHook<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new(false);
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let out = forward(&mut tape, self.config(), &bound, tokens, batch, cache, hooks)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Untraced final-norm hidden states `[B, T, d]`.
    pub fn hidden(&self, tokens: &[u32], batch: usize, hooks: &mut dyn NormHook<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new(false);
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let out = forward(&mut tape, self.config(), &bound, tokens, batch, None, hooks)?;
        Ok(tape.value(out.hidden).clone())
    }
}

/// Outputs of [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `[B, T, V]`
    pub logits: Var,
    /// Final-norm output `[B, T, d]`.
    pub hidden: Var,
}

fn apply_norm<'a, F: Scalar>(
    tape: &mut Tape<'a, F>,
    x: Var,
    norm: &BoundNorm,
    eps: F,
    site: NormSite,
    batch: usize,
    hooks: &mut dyn NormHook<F>,
) -> Result<Var> {
    let mut y = tape.rms_norm(x, norm.weight, eps)?;
    if let Some(b) = norm.bias {
        y = tape.add_row(y, b)?;
    }
    let d = tape.value(x).cols();
    if let Some(z) = hooks.offset(site, batch, d)? {
        y = tape.add_batch_offset(y, &z, batch)?;
    }
    Ok(y)
}

fn project<'a, F: Scalar>(tape: &mut Tape<'a, F>, x: Var, w: Var, lora: Option<(Var, Var)>, scale: f64) -> Result<Var> {
    let y = tape.linear(x, w)?;
    match lora {
        None => Ok(y),
        Some((a, b)) => {
            let down = tape.linear(x, b)?;
            let up = tape.linear(down, a)?;
            let up = tape.scale(up, F::from_f64_lossy(scale));
            tape.add(y, up)
        }
    }
}

/// Runs the network on `tokens` (`[B, T]` row-major).
///
/// With a cache, only the new positions are computed and their keys/values
/// are appended; this requires an untraced tape.
pub fn forward<'a, F: Scalar>(
    tape: &mut Tape<'a, F>,
    cfg: &ModelConfig,
    bound: &BoundModel,
    tokens: &[u32],
    batch: usize,
    mut cache: Option<&mut KvCache<F>>,
    hooks: &mut dyn NormHook<F>,
) -> Result<ForwardOut> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::Dimension(format!("{} tokens for batch {batch}", tokens.len())));
    }
    let t = tokens.len() / batch;
    let start = cache.as_ref().map_or(0, |c| c.len());
    if start + t > cfg.max_seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {} exceeds max_seq_len {}",
            start + t,
            cfg.max_seq_len
        )));
    }
    if let Some(c) = cache.as_ref() {
        if c.batch() != batch {
            return Err(Error::Dimension(format!("cache batch {} vs input batch {batch}", c.batch())));
        }
        if tape.is_tracing() {
            return Err(Error::Contract("KV-cached forward cannot be traced".into()));
        }
    }
    let eps = F::from_f64_lossy(cfg.norm_eps);
    let d = cfg.d_model;
    let positions: Vec<usize> = (0..batch).flat_map(|_| start..start + t).collect();
    let mut x = tape.embedding(bound.tok_embed, tokens, &[batch, t])?;
    for (l, blk) in bound.blocks.iter().enumerate() {
        let lora = &bound.lora[l];
        let h = apply_norm(tape, x, &blk.attn_norm, eps, NormSite::Attn(l), batch, hooks)?;
        let q = project(tape, h, blk.proj[0], lora[0], bound.lora_scale)?;
        let k = project(tape, h, blk.proj[1], lora[1], bound.lora_scale)?;
        let v = project(tape, h, blk.proj[2], lora[2], bound.lora_scale)?;
        let q = tape.rope(q, &positions, cfg.n_heads, cfg.rope_base)?;
        let k = tape.rope(k, &positions, cfg.n_heads, cfg.rope_base)?;
        let attn = match cache.as_deref_mut() {
            None => tape.attention(q, k, v, batch, cfg.n_heads)?,
            Some(c) => {
                c.write(l, start, t, tape.value(k).data(), tape.value(v).data());
                let (kb, vb) = c.layer(l);
                tape.attention_cached(q, kb, vb, batch, start + t, c.batch_stride(), cfg.n_heads)?
            }
        };
        let o = project(tape, attn, blk.proj[3], lora[3], bound.lora_scale)?;
        x = tape.add(x, o)?;
        let h = apply_norm(tape, x, &blk.mlp_norm, eps, NormSite::Mlp(l), batch, hooks)?;
        let gate = tape.linear(h, blk.w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.linear(h, blk.w_up)?;
        let act = tape.mul(gate, up)?;
        let down = tape.linear(act, blk.w_down)?;
        x = tape.add(x, down)?;
    }
    let hidden = apply_norm(tape, x, &bound.final_norm, eps, NormSite::Final, batch, hooks)?;
    let logits = tape.linear(hidden, bound.head)?;
    if let Some(c) = cache {
        c.advance(t);
    }
    debug_assert_eq!(tape.value(hidden).cols(), d);
    Ok(ForwardOut { logits, hidden })
}
