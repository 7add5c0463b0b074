//! Low-rank adapters on attention projections.
//!
//! For a frozen weight `W[d_out×d_in]` the adapted weight is
//! `W + (alpha / r) · A · B` with `A[d_out×r]` and `B[r×d_in]`. `A` starts at
//! zero, so a fresh adapter leaves the model output unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{fill_standard_normal, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention projection that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0, targets: vec![Projection::Q, Projection::V] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<F> {
    /// `[d_out × r]`, zero at init.
    pub a: Tensor<F>,
    /// `[r × d_in]`, Gaussian at init.
    pub b: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F = f32> {
    pub config: LoraConfig,
    /// `layers[l][projection]`.
    pub layers: Vec<[Option<LoraPair<F>>; 4]>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn new(model: &ModelConfig, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 || config.targets.is_empty() {
            return Err(Error::Config("adapter needs rank ≥ 1 and at least one target".into()));
        }
        let d = model.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(model.n_layers);
        for l in 0..model.n_layers {
            let mut slots: [Option<LoraPair<F>>; 4] = Default::default();
            for &p in &config.targets {
                let mut buf = vec![0.0; config.rank * d];
                let mut rng = stream(seed, (l * 4 + p.index()) as u64);
                fill_standard_normal(&mut rng, &mut buf);
                buf.iter_mut().for_each(|v| *v *= std);
                slots[p.index()] = Some(LoraPair {
                    a: Tensor::zeros(vec![d, config.rank]),
                    b: Tensor::from_f64(vec![config.rank, d], &buf)?,
                });
            }
            layers.push(slots);
        }
        Ok(Self { config, layers })
    }

    pub fn scaling(&self) -> F {
        F::from_f64_lossy(self.config.alpha / self.config.rank as f64)
    }

    /// `(name, tensor)` for every adapter tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (l, slots) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                if let Some(pair) = &slots[p.index()] {
                    out.push((format!("lora.layers.{l}.{}.a", p.name()), &pair.a));
                    out.push((format!("lora.layers.{l}.{}.b", p.name()), &pair.b));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for slots in &mut self.layers {
            for pair in slots.iter_mut().flatten() {
                out.push(&mut pair.a);
                out.push(&mut pair.b);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|s| s.iter().flatten())
            .all(|p| p.a.data().iter().all(|v| *v == F::zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_adapter_is_under_one_percent_of_default_model() {
        let cfg = ModelConfig::default();
        let adapter = LoraAdapter::<f32>::new(&cfg, LoraConfig::default(), 0).unwrap();
        let frac = adapter.num_params() as f64 / cfg.num_params() as f64;
        assert!(frac < 0.01, "trainable fraction {frac}");
        assert!(adapter.is_zero());
        assert_eq!(adapter.named().len(), 2 * 2 * cfg.n_layers);
    }

    #[test]
    fn rank_zero_rejected() {
        let cfg = ModelConfig::default();
        let bad = LoraConfig { rank: 0, ..Default::default() };
        assert!(LoraAdapter::<f32>::new(&cfg, bad, 0).is_err());
    }
}
