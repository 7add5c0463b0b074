//! Stochastic normalization offsets.
//!
//! A [`WrappedModel`] turns selected norm sites into `y = Norm(x)·w + (b + z)`
//! with `z ~ N(μ, σ²)` of shape `[B, 1, d]`, one independent draw per site and
//! batch row. In sequence mode `z` is drawn once per row and reused for every
//! decode step until the posterior is reset; in token mode each forward call
//! draws afresh. The base parameters are shared read-only through an `Arc`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{generate_rows, DecodeConfig, Generation};
use crate::lora::LoraAdapter;
use crate::model::{ModelConfig, ModelParams, ModelRef, NormHook, NormSite};
use crate::rng::{derive_seed, fill_standard_normal, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePrior {
    #[serde(default)]
    pub mu: f64,
    pub sigma: f64,
}

impl NoisePrior {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::Config(format!("invalid prior mu={mu}, sigma={sigma}")));
        }
        Ok(Self { mu, sigma })
    }
}

impl Default for NoisePrior {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Off,
    Sequence,
    Token,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Off, NoiseMode::Sequence, NoiseMode::Token];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Off => "off",
            NoiseMode::Sequence => "sequence",
            NoiseMode::Token => "token",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which norm sites receive offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSelector {
    /// Every block norm plus the final norm.
    All,
    BlocksOnly,
    FinalOnly,
    Sites(Vec<NormSite>),
}

impl Default for SiteSelector {
    fn default() -> Self {
        SiteSelector::All
    }
}

impl SiteSelector {
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<Vec<NormSite>> {
        let all = cfg.norm_sites();
        let picked: Vec<NormSite> = match self {
            SiteSelector::All => all,
            SiteSelector::BlocksOnly => all.into_iter().filter(|s| *s != NormSite::Final).collect(),
            SiteSelector::FinalOnly => vec![NormSite::Final],
            SiteSelector::Sites(list) => {
                let mut v: Vec<NormSite> = list.iter().copied().filter(|s| all.contains(s)).collect();
                v.sort();
                v.dedup();
                v
            }
        };
        if picked.is_empty() {
            return Err(Error::Config(format!("site selector {self:?} matches no norm layer")));
        }
        Ok(picked)
    }
}

/// Per-site noise state.
#[derive(Clone, Debug)]
pub struct NoiseState<F> {
    /// Cached offset `[B, 1, d]`; present only in sequence mode after a draw.
    pub z: Option<Tensor<F>>,
    pub mode: NoiseMode,
    /// Draws since the last reset; also the counter feeding token-mode streams.
    pub draws_since_reset: u64,
    pub total_draws: u64,
    pub applications: u64,
}

impl<F> NoiseState<F> {
    fn new(mode: NoiseMode) -> Self {
        Self { z: None, mode, draws_since_reset: 0, total_draws: 0, applications: 0 }
    }
}

/// One applied offset, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    /// Index of the hook call since the last reset.
    pub call: u64,
    pub site: NormSite,
    pub mode: NoiseMode,
    /// Whether this application drew a new `z`.
    pub fresh: bool,
    pub z: Vec<f64>,
}

/// Base parameters plus stochastic offsets at the selected norm sites.
#[derive(Clone)]
pub struct WrappedModel<F: Scalar = f32> {
    base: Arc<ModelParams<F>>,
    prior: NoisePrior,
    mode: NoiseMode,
    registry: BTreeMap<NormSite, NoiseState<F>>,
    /// One noise seed per batch row.
    row_seeds: Vec<u64>,
    forward_calls: u64,
    calls_by_mode: [u64; 3],
    trace: Option<Vec<TraceEntry>>,
}

/// Wraps the selected norm sites of `params`.
pub fn apply_bayesian_transform<F: Scalar>(
    params: Arc<ModelParams<F>>,
    prior: NoisePrior,
    selector: &SiteSelector,
) -> Result<WrappedModel<F>> {
    let prior = NoisePrior::new(prior.mu, prior.sigma)?;
    let sites = selector.resolve(&params.config)?;
    let registry = sites.into_iter().map(|s| (s, NoiseState::new(NoiseMode::Sequence))).collect();
    Ok(WrappedModel {
        base: params,
        prior,
        mode: NoiseMode::Sequence,
        registry,
        row_seeds: vec![0],
        forward_calls: 0,
        calls_by_mode: [0; 3],
        trace: None,
    })
}

impl<F: Scalar> WrappedModel<F> {
    pub fn base(&self) -> &Arc<ModelParams<F>> {
        &self.base
    }

    pub fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    pub fn prior(&self) -> NoisePrior {
        self.prior
    }

    pub fn set_prior(&mut self, prior: NoisePrior) -> Result<()> {
        self.prior = NoisePrior::new(prior.mu, prior.sigma)?;
        self.clear_cache();
        Ok(())
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    /// Switches mode without discarding cached offsets, so a rollout can be
    /// interleaved with deterministic evaluation.
    pub fn set_mode(&mut self, mode: NoiseMode) {
        self.mode = mode;
        for s in self.registry.values_mut() {
            s.mode = mode;
        }
    }

    pub fn sites(&self) -> Vec<NormSite> {
        self.registry.keys().copied().collect()
    }

    pub fn state(&self, site: NormSite) -> Option<&NoiseState<F>> {
        self.registry.get(&site)
    }

    pub fn row_seeds(&self) -> &[u64] {
        &self.row_seeds
    }

    fn clear_cache(&mut self) {
        for s in self.registry.values_mut() {
            s.z = None;
            s.draws_since_reset = 0;
        }
        self.forward_calls = 0;
    }

    /// Clears every cached offset; the next forward draws a new instance
    /// from the same per-row seeds.
    pub fn reset_posterior(&mut self) {
        self.clear_cache();
    }

    /// Clears cached offsets and assigns one noise seed per batch row.
    pub fn reset_posterior_seeded(&mut self, row_seeds: &[u64]) {
        self.row_seeds = row_seeds.to_vec();
        self.clear_cache();
    }

    /// Draws `z` for `site` over `batch` rows.
    ///
    /// Row `r` uses the stream `(derive_seed(seed_r, draw), site_index)`, so a
    /// row's offsets do not depend on how many rows share the batch.
    pub fn sample_offset(&mut self, site: NormSite, batch: usize) -> Result<Tensor<F>> {
        let d = self.base.config.d_model;
        let n_layers = self.base.config.n_layers;
        let (prior, mode) = (self.prior, self.mode);
        if mode == NoiseMode::Off {
            return Err(Error::Noise("sample_offset called with noise off".into()));
        }
        if batch != self.row_seeds.len() {
            return Err(Error::Noise(format!(
                "batch of {batch} rows but {} row seeds; call reset_posterior_seeded",
                self.row_seeds.len()
            )));
        }
        let state = self
            .registry
            .get_mut(&site)
            .ok_or_else(|| Error::Noise(format!("site {site:?} is not wrapped")))?;
        if mode == NoiseMode::Sequence {
            if let Some(z) = &state.z {
                return Ok(z.clone());
            }
        }
        let draw = state.draws_since_reset;
        let mut data = Vec::with_capacity(batch * d);
        let mut eps = vec![0.0; d];
        for &seed in &self.row_seeds {
            let mut rng = stream(derive_seed(seed, draw), site.index(n_layers) as u64);
            fill_standard_normal(&mut rng, &mut eps);
            data.extend(eps.iter().map(|e| F::from_f64_lossy(prior.mu + prior.sigma * e)));
        }
        let z = Tensor::new(vec![batch, 1, d], data)?;
        state.draws_since_reset += 1;
        state.total_draws += 1;
        if mode == NoiseMode::Sequence {
            state.z = Some(z.clone());
        }
        Ok(z)
    }

    /// Bytes the sequence-mode cache needs for `batch` rows.
    pub fn noise_cache_bytes(&self, batch: usize) -> usize {
        noise_cache_bytes(self.registry.len(), batch, self.base.config.d_model, F::BYTES)
    }

    /// Bytes currently held by cached offsets.
    pub fn allocated_cache_bytes(&self) -> usize {
        self.registry.values().filter_map(|s| s.z.as_ref()).map(|z| z.len() * F::BYTES).sum()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Hook invocations (one per site per forward call) in the given mode.
    pub fn calls_in_mode(&self, mode: NoiseMode) -> u64 {
        self.calls_by_mode[mode.slot()]
    }

    /// Total `z` draws across all sites since construction.
    pub fn total_draws(&self) -> u64 {
        self.registry.values().map(|s| s.total_draws).sum()
    }

    /// Decodes one row per entry of `noise_seeds` under this wrapper.
    pub fn generate_members(
        &mut self,
        adapter: Option<&LoraAdapter<F>>,
        prompt: &[u32],
        cfg: &DecodeConfig,
        noise_seeds: &[u64],
        decode_seeds: &[u64],
    ) -> Result<Vec<Generation>> {
        if noise_seeds.len() != decode_seeds.len() {
            return Err(Error::Contract("one decode seed per noise seed".into()));
        }
        self.reset_posterior_seeded(noise_seeds);
        let base = Arc::clone(&self.base);
        generate_rows(ModelRef::with_adapter(&base, adapter), prompt, cfg, decode_seeds, self)
    }

    /// Untraced logits under the current noise state.
    pub fn logits(&mut self, adapter: Option<&LoraAdapter<F>>, tokens: &[u32], batch: usize) -> Result<Tensor<F>> {
        let base = Arc::clone(&self.base);
        ModelRef::with_adapter(&base, adapter).logits(tokens, batch, None, self)
    }
}

impl<F: Scalar> NormHook<F> for WrappedModel<F> {
    fn offset(&mut self, site: NormSite, batch: usize, d_model: usize) -> Result<Option<Tensor<F>>> {
        if site == self.base.config.norm_sites()[0] {
            self.forward_calls += 1;
        }
        let mode = self.mode;
        if !self.registry.contains_key(&site) {
            return Ok(None);
        }
        self.calls_by_mode[mode.slot()] += 1;
        if mode == NoiseMode::Off {
            // the mean shift: z ≡ μ
            if self.prior.mu == 0.0 {
                return Ok(None);
            }
            let z = Tensor::full(vec![batch, 1, d_model], F::from_f64_lossy(self.prior.mu));
            self.registry.get_mut(&site).unwrap().applications += 1;
            return Ok(Some(z));
        }
        let before = self.registry[&site].draws_since_reset;
        let z = self.sample_offset(site, batch)?;
        let state = self.registry.get_mut(&site).unwrap();
        state.applications += 1;
        let fresh = state.draws_since_reset != before;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                call: self.forward_calls.saturating_sub(1),
                site,
                mode,
                fresh,
                z: z.to_f64_vec(),
            });
        }
        // An exactly-zero offset is skipped so that σ = μ = 0 leaves every bit
        // of the output untouched (adding +0.0 would flip -0.0).
        if z.data().iter().all(|v| *v == F::zero()) {
            return Ok(None);
        }
        Ok(Some(z))
    }
}

/// `sites × batch × d × bytes_per_element`.
pub fn noise_cache_bytes(sites: usize, batch: usize, d_model: usize, bytes: usize) -> usize {
    sites * batch * d_model * bytes
}

/// Size of per-instance dropout-style masks over every weight matrix,
/// stored at `bytes` per element.
pub fn mask_cache_bytes(cfg: &ModelConfig, batch: usize, bytes: usize) -> usize {
    cfg.num_matrix_params() * batch * bytes
}

/// Memory accounting for one config.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub sites: usize,
    pub batch: usize,
    pub d_model: usize,
    pub noise_cache_bytes: usize,
    pub mask_cache_bytes: usize,
    /// `mask / noise`; absent when the noise cache is empty.
    pub ratio: Option<f64>,
}

/// Noise cache at f32 versus a mask cache at half precision.
pub fn memory_report(cfg: &ModelConfig, selector: &SiteSelector, batch: usize) -> Result<MemoryReport> {
    let sites = selector.resolve(cfg)?.len();
    let noise = noise_cache_bytes(sites, batch, cfg.d_model, 4);
    let mask = mask_cache_bytes(cfg, batch, 2);
    Ok(MemoryReport {
        sites,
        batch,
        d_model: cfg.d_model,
        noise_cache_bytes: noise,
        mask_cache_bytes: mask,
        ratio: (noise > 0).then(|| mask as f64 / noise as f64),
    })
}

/// A 7B-class shape used for hypothetical memory accounting.
pub fn seven_b_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32000,
        d_model: 4096,
        n_layers: 32,
        n_heads: 32,
        d_ff: 11008,
        max_seq_len: 4096,
        norm_eps: 1e-6,
        rope_base: 10000.0,
        norm_bias: false,
    }
}
