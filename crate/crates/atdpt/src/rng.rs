//! Seed derivation for reproducible substreams.
//!
//! Every piece of randomness in an experiment is drawn from a ChaCha stream
//! keyed by the experiment seed plus stable integer indices (task, round,
//! replication, stream tag). The mixing constants are fixed so traces can be
//! matched by an independent implementation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep substreams for different purposes disjoint even when the
/// surrounding indices coincide.
pub mod tag {
    pub const TASK_SAMPLING: u64 = 0x01;
    pub const ROLLOUT: u64 = 0x02;
    pub const ATTACKER_INIT: u64 = 0x03;
    pub const ATTACKER_UPDATE: u64 = 0x04;
    pub const MODEL_INIT: u64 = 0x05;
    pub const PRETRAIN: u64 = 0x06;
    pub const SUPERVISED: u64 = 0x07;
    pub const VICTIM: u64 = 0x08;
    pub const QUERY: u64 = 0x09;
    pub const UNIFORM_ATTACK: u64 = 0x0a;
}

/// 64-bit avalanche mix (splitmix64 finalizer).
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Combine an experiment seed with a list of indices into a substream seed.
pub fn substream_seed(seed: u64, indices: &[u64]) -> u64 {
    let mut acc = mix64(seed);
    for &ix in indices {
        acc = mix64(acc ^ ix.wrapping_mul(0xff51afd7ed558ccd));
    }
    acc
}

/// A seeded ChaCha stream for the given (seed, indices) key.
pub fn substream(seed: u64, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, indices))
}
