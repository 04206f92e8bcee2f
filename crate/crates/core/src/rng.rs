//! Seeded random sub-streams.
//!
//! All randomness in a run flows from a single seed. Each consumer
//! (signal generation, weight init, shuffling, measurement noise, ...)
//! draws from its own named ChaCha stream so that changing one stage's
//! consumption never perturbs another stage's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a stream name, used as the ChaCha stream id.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for the sub-stream `name` under the given seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
