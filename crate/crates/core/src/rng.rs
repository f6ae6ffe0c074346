//! Seed stream splitting.
//!
//! Every random draw in a run derives from one user seed. Each consumer asks
//! for its own stream by label; the stream seed is `SHA-256(label || 0x00 ||
//! seed_le)`, which keeps streams independent and stable across releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use alloc::vec::Vec;

pub type StreamRng = ChaCha8Rng;

/// Returns the generator for `label` under the run seed `seed`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// `n` independent standard normal draws.
pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
