//! Stochastic normalization offsets for sampling coherent model instances
//! from one small decoder-only transformer, plus the population, metric and
//! policy-optimization machinery built on top of them.

pub mod autograd;
pub mod bayes;
pub mod checkpoint;
pub mod error;
pub mod generate;
pub mod gradcheck;
mod kernels;
pub mod kv_cache;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod population;
pub mod rng;
pub mod rl;
pub mod scalar;
pub mod sft;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::Tensor;
