//! Seed-stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from the single master seed plus a purpose tag and an index. Streams for
//! different purposes are independent, so adding or removing draws in one
//! code path never shifts the values seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Each purpose gets its own key domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Graclus visit-order permutations (per mesh, per level).
    Matching,
    /// Parameter initialization (per tensor).
    Init,
    /// Fold assignment and epoch shuffling.
    Folds,
    /// Synthetic mesh generation (per mesh, per field).
    Generation,
    /// Power-iteration start vectors.
    PowerIteration,
    /// Anything test-local.
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Matching => 0x4d41_5443_484e,
            Purpose::Init => 0x494e_4954,
            Purpose::Folds => 0x464f_4c44,
            Purpose::Generation => 0x4745_4e45,
            Purpose::PowerIteration => 0x504f_5745,
            Purpose::Test => 0x5445_5354,
        }
    }
}

/// SplitMix64: the standard 64-bit finalizer used to decorrelate seed keys.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a deterministic RNG for (seed, purpose, index).
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let a = splitmix64(seed ^ splitmix64(purpose.tag()));
    let b = splitmix64(a ^ index);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&splitmix64(b).to_le_bytes());
    key[24..].copy_from_slice(&splitmix64(b ^ 0x5bd1_e995).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Deterministic 64-bit sub-seed for handing to APIs that take a plain seed.
pub fn subseed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(purpose.tag())) ^ index)
}
