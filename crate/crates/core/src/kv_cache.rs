//! Per-layer key/value buffers for incremental decoding.

use crate::scalar::Scalar;

/// Keys and values laid out `[B, capacity, d]` per layer.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    batch: usize,
    capacity: usize,
    d: usize,
    len: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(n_layers: usize, batch: usize, capacity: usize, d: usize) -> Self {
        let size = batch * capacity * d;
        Self {
            keys: vec![vec![F::zero(); size]; n_layers],
            values: vec![vec![F::zero(); size]; n_layers],
            batch,
            capacity,
            d,
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub(crate) fn batch_stride(&self) -> usize {
        self.capacity * self.d
    }

    /// Stores `t` new positions (row-major `[B, t, d]`) starting at `start`.
    pub(crate) fn write(&mut self, layer: usize, start: usize, t: usize, k: &[F], v: &[F]) {
        assert!(start + t <= self.capacity, "kv cache overflow");
        let d = self.d;
        for b in 0..self.batch {
            let src = b * t * d..(b + 1) * t * d;
            let dst = (b * self.capacity + start) * d..(b * self.capacity + start + t) * d;
            self.keys[layer][dst.clone()].copy_from_slice(&k[src.clone()]);
            self.values[layer][dst].copy_from_slice(&v[src]);
        }
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[F], &[F]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub(crate) fn advance(&mut self, t: usize) {
        self.len += t;
    }
}
