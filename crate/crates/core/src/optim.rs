//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state for a fixed list of parameter groups.
///
/// Moments are kept in `f32` so that a checkpointed state resumes bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `params[i]` and `grads[i]` pair with group `i`.
    pub fn step<F: Scalar>(&mut self, params: &mut [&mut [F]], grads: &[&[F]], lr_scale: f64) {
        self.step += 1;
        let c = self.config;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                let gv = g[i].as_f64();
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gv;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gv * gv;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let mut x = p[i].as_f64();
                if c.weight_decay > 0.0 {
                    x -= lr * c.weight_decay * x;
                }
                p[i] = F::from_f64_lossy(x - lr * update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = vec![1.0f32, -2.0];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        opt.step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], 1.0);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0f64];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[1]);
        for _ in 0..500 {
            let g = [2.0 * (x[0] - 1.0)];
            opt.step(&mut [&mut x[..]], &[&g[..]], 1.0);
        }
        assert!((x[0] - 1.0).abs() < 1e-2);
    }
}
