//! Counter-based random source.
//!
//! A source is addressed by `(seed, counter)`: the seed keys a ChaCha block
//! cipher and the counter selects one of its 2^64 independent streams. Child
//! sources are derived by hashing the parent counter with an offset, so work
//! split across records draws from streams that do not depend on the order in
//! which records are processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    counter: u64,
    rng: ChaCha12Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(counter);
        Self { seed, counter, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Stream for sub-task `offset`, independent of how much of `self` was consumed.
    pub fn child(&self, offset: u64) -> Self {
        let counter = splitmix64(self.counter ^ splitmix64(offset.wrapping_add(1)));
        Self::at(self.seed, counter)
    }

    /// Derives a fresh child and advances `self`, for call sites that hand out
    /// sub-sources sequentially.
    pub fn fork(&mut self) -> Self {
        let offset = self.rng.random::<u64>();
        self.child(offset)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }
}
