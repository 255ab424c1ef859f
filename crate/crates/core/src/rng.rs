//! Deterministic random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. Streams are
//! xoshiro256++ generators whose state is expanded from a 64-bit seed with
//! SplitMix64; a stream name is folded into the seed so that independent
//! consumers (initialization, augmentation, k-means, ...) never share state.

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub struct Stream(Xoshiro256PlusPlus);

/// FNV-1a, used only to turn stream names into seed offsets.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Stream {
    pub fn new(seed: u64, name: &str) -> Self {
        Stream(Xoshiro256PlusPlus::seed_from_u64(seed ^ name_hash(name)))
    }

    /// Derives a child stream; the parent advances by one draw.
    pub fn fork(&mut self, name: &str) -> Self {
        let s = self.0.next_u64();
        Stream::new(s, name)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}
