//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream selected by a
//! `(seed, stream)` pair. ChaCha is counter based, so the `k`-th draw of a
//! stream is a pure function of `(seed, stream, k)` and independent replicas
//! can run on any thread in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream ids reserved for the pipeline stages so they never collide with
/// replica indices (which count up from zero).
pub mod stream {
    pub const LEARN: u64 = 1 << 40;
    pub const ESTIMATE: u64 = 2 << 40;
    pub const RESERVOIR: u64 = 3 << 40;
    pub const LYAPUNOV: u64 = 4 << 40;
}

pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed, used when one logical run spawns sub-runs
/// (sweep entries, per-factor learners).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
