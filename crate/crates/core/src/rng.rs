//! Seeded random source used for weight init and test inputs.
//!
//! Sequences are stable for a given seed within this crate. They are not
//! meant to match generators in other languages.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Independent child stream keyed by `tag`.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(derive_seed(self.seed, tag))
    }
}

/// SplitMix64 mix of `(master, tag)`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..32 {
            assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
        }
    }

    #[test]
    fn forks_differ() {
        let r = Rng::new(1);
        assert_ne!(r.fork(0).next_u64(), r.fork(1).next_u64());
        assert_ne!(derive_seed(1, 2), derive_seed(2, 1));
    }
}
