//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `u64` seed. Streams for named
//! sub-computations are derived from `(seed, name)` so that running them in any order
//! or concurrently yields the same numbers.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Xoshiro256++ seeded through SplitMix64.
pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Independent stream for the sub-computation `name` under `seed`.
pub fn derived(seed: u64, name: &str) -> Rng {
    // FNV-1a over the name, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}
