//! Seed derivation and Gaussian sampling.
//!
//! All streams are ChaCha8 (counter-based, portable), so every draw is
//! bit-reproducible across platforms given its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the `index`-th child of `base`: `mix64(base ^ index)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ index)
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Fills `out` with i.i.d. standard normals via the Box–Muller transform.
pub fn fill_standard_normal(rng: &mut impl Rng, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        // u1 in (0, 1] keeps the logarithm finite
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        pair[0] = r * theta.cos();
        if pair.len() > 1 {
            pair[1] = r * theta.sin();
        }
    }
}
