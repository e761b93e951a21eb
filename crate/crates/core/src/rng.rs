//! Labeled, forkable random streams.
//!
//! Every stream is a ChaCha20 keystream whose 64-bit seed is derived from its
//! parent's seed and a label through SHA-256, so the draws for one concern
//! (init, corruption, masking, data, eval) never depend on how many draws
//! another concern consumed.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub const ALGORITHM: &str = "chacha20";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha20Rng,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let derived = derive_seed(seed, label);
        Self {
            seed: derived,
            label: label.to_string(),
            inner: ChaCha20Rng::seed_from_u64(derived),
            draws: 0,
        }
    }

    /// Root stream for a run.
    pub fn root(seed: u64) -> Self {
        Self::new(seed, "root")
    }

    /// Deterministic child stream; independent of how much of `self` was consumed.
    pub fn fork(&self, label: &str) -> Self {
        assert!(!label.is_empty(), "fork label must be nonempty");
        let derived = derive_seed(self.seed, label);
        Self {
            seed: derived,
            label: format!("{}/{}", self.label, label),
            inner: ChaCha20Rng::seed_from_u64(derived),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32-bit words consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    /// Uniform in `[lo, hi]`; returns `lo` exactly when the interval is a point.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        if hi == lo {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(self);
    }

    /// `k` distinct indices from `0..n`, sorted ascending.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx.sort_unstable();
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 2;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += dst.len().div_ceil(4) as u64;
        self.inner.fill_bytes(dst)
    }
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
