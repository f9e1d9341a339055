//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`SimRng`]. Named sub-streams are
//! derived by hashing `(root seed, name)` so running a subset of experiments
//! never shifts the randomness seen by another one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a 64-bit seed for the stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(root: u64, name: &str) -> SimRng {
    seeded(derive_seed(root, name))
}

pub fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random probability vector (Dirichlet(1, ..., 1)).
pub fn simplex(rng: &mut SimRng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn index(rng: &mut SimRng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Draws an index from an (unnormalised) non-negative weight vector.
pub fn categorical(rng: &mut SimRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
