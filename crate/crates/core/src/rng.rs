//! Named, seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used by every entry point when none is given.
pub const DEFAULT_SEED: u64 = 42;

/// 64-bit FNV-1a.
pub fn fnv1a(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Independent stream for `name` under `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}
