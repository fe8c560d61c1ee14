//! Seeded random streams.
//!
//! All randomness in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! which is specified independently of platform and word size. Standard normal
//! variates use the Box–Muller transform on two open-interval uniforms, one
//! variate per pair (the sine branch is discarded so every draw consumes
//! exactly two 64-bit words). Independent work units (MAP seeds, chains,
//! summary blocks) take sub-seeds from [`derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer applied to `seed + (index + 1) * golden gamma`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on the open interval (0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        let bits = self.rng.random::<u64>() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
