//! Labeled, reproducible random streams.
//!
//! Every stochastic component draws from an [`RngStream`] identified by a
//! `(seed, stream id)` pair. Stream ids for named purposes are derived from a
//! hash of the purpose string, so introducing a new consumer never shifts the
//! draws seen by an existing one.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream whose id is the hash of `purpose`.
    pub fn labeled(seed: u64, purpose: &str) -> Self {
        Self::new(seed, stream_id(purpose))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh stream for a sub-purpose, independent of how many draws
    /// have been taken from `self`.
    pub fn derive(&self, purpose: &str) -> Self {
        Self::new(self.seed, mix(self.stream, stream_id(purpose)))
    }

    /// A fresh stream for the `index`-th item (trial, step, grid point).
    pub fn fork(&self, index: u64) -> Self {
        Self::new(
            self.seed,
            mix(self.stream, index.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        )
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stable 64-bit id for a purpose string.
pub fn stream_id(purpose: &str) -> u64 {
    let digest = Sha256::digest(purpose.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.rotate_left(32) ^ 0xbf58_476d_1ce4_e5b9;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
