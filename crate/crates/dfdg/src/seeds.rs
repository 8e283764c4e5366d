//! Seed derivation. Every random stream in a run descends from the single
//! experiment seed through (salt, index) labels, so adding a new stream never
//! shifts an existing one. All generators are ChaCha12 (the `rng_family`
//! recorded in configs and run records).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(base, salt, index)`.
pub fn derive_seed(base: u64, salt: &str, index: u64) -> u64 {
    // FNV-1a over the salt keeps distinct labels distinct.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(splitmix64(base ^ h).wrapping_add(index))
}

pub fn rng_from(base: u64, salt: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, salt, index))
}

/// The single PRNG family used everywhere; persisted so records are explicit
/// about what "same seeds" means.
pub const RNG_FAMILY: &str = "chacha12";
