//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (initialisation, augmentation, cropping,
//! scene layout, artifact placement) asks for its own stream by name, so
//! adding draws to one purpose never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit seed for `(seed, purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the purpose label, then mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// A generator for the named purpose under `seed`.
pub fn stream(seed: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose))
}

/// A generator for the `index`-th instance of a purpose (e.g. one per step).
pub fn indexed_stream(seed: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(derive_seed(seed, purpose) ^ splitmix64(index)))
}
