//! Seeded, splittable random streams.
//!
//! Every stream is ChaCha20 keyed by a SHA-256 digest. The root key of seed
//! `s` is `SHA-256("d2s-rng-v1" ‖ s as little-endian u64)`, and the key of a
//! named substream is `SHA-256(parent key ‖ 0x2f ‖ utf-8 name)`. Streams start
//! at block 0 of ChaCha stream id 0. Derived values:
//!
//! * `uniform()`: `(next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`
//! * `normal()`: Box–Muller cosine branch over two uniforms `u₁, u₂`:
//!   `sqrt(-2 ln(1 - u₁)) · cos(2π u₂)`
//! * `below(n)`: rejection sampling on `next_u64` against the largest
//!   multiple of `n`, then `mod n`
//! * `shuffle`: Fisher–Yates from the last index down using `below(i + 1)`

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const ALGORITHM_ID: &str = "chacha20-sha256-v1";

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    key: [u8; 32],
    core: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"d2s-rng-v1");
        hasher.update(seed.to_le_bytes());
        Self::from_key(seed, hasher.finalize().into())
    }

    fn from_key(seed: u64, key: [u8; 32]) -> Self {
        Self {
            seed,
            key,
            core: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm_id(&self) -> &'static str {
        ALGORITHM_ID
    }

    /// Independent stream derived from this stream's key and `name`. The
    /// parent's position is irrelevant: substreams depend only on the key.
    pub fn substream(&self, name: &str) -> SeededRng {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update(b"/");
        hasher.update(name.as_bytes());
        Self::from_key(self.seed, hasher.finalize().into())
    }

    pub fn uniform(&mut self) -> f64 {
        (self.core.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.core.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.core.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.core.fill_bytes(dst)
    }
}
