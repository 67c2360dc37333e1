//! Deterministic seed derivation.
//!
//! Every randomness consumer in the crate (weight init, per-client local
//! heads, batch shuffling, client sampling, partitioning, synthetic data)
//! draws from its own ChaCha8 stream derived from the single experiment seed.
//! Two consumers never share a stream, so adding draws to one cannot perturb
//! another, and a run is reproducible from `(seed)` alone.

use rand_chacha::ChaCha8Rng;

/// Stream tags. One constant per consumer; never reuse a tag for a new
/// purpose or previously recorded runs stop being reproducible.
pub mod stream {
    /// Server-side initialization of base + global head weights.
    pub const MODEL_INIT: u64 = 1;
    /// Per-client local head initialization (index = client).
    pub const LOCAL_HEAD: u64 = 2;
    /// Per-client epoch shuffling of the training shard (index = client).
    pub const BATCH: u64 = 3;
    /// Server sampling of the per-round client subset.
    pub const SAMPLING: u64 = 4;
    /// Data partitioning across clients.
    pub const PARTITION: u64 = 5;
    /// Held-out split performed before partitioning.
    pub const HOLDOUT: u64 = 6;
    /// Synthetic dataset generation.
    pub const SYNTHESIS: u64 = 7;
    /// Construction of per-client test shards.
    pub const TEST_BUILD: u64 = 8;
}

/// One round of the SplitMix64 output mixer. Good avalanche behaviour for
/// cheap; this is the standard finalizer, not a hand-rolled hash.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed from `(seed, tag, index)`.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

/// A fresh ChaCha8 generator for the `(seed, tag, index)` stream.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
