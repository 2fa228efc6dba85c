//! Seeding discipline for every random choice the engine makes.
//!
//! All randomness flows through ChaCha12 ([`rand_chacha::ChaCha12Rng`]), a
//! portable counter-based generator whose output is identical on every
//! platform and word size. Subsystems never share an RNG: each draws its own
//! generator from [`derive_rng`], keyed by the global run seed plus a label
//! string (for example `"balance/execute/agibot|arm_x|pick"`), so adding or
//! reordering one consumer cannot shift the streams seen by another.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives an independent ChaCha12 generator from the run seed and a label.
///
/// The 256-bit ChaCha key is `SHA-256(seed_le_bytes || label)`.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// In-place Fisher–Yates shuffle.
///
/// Spelled out rather than delegated so the exact swap sequence is pinned by
/// this crate, not by a dependency's implementation detail.
pub fn fisher_yates<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Selects `k` distinct indices from `0..n`, in selection order.
///
/// Partial Fisher–Yates: only the first `k` positions are settled.
pub fn sample_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
