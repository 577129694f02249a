//! Seed substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator whose seed is
//! derived from a base seed, a string tag and a tuple of indices (day, bus,
//! sample, ...). Derivation is a FNV-1a hash of the tag followed by SplitMix64
//! mixing of each index, so a substream never depends on the order in which
//! other substreams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from `base`, a tag and a list of indices.
pub fn derive_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ fnv1a(tag.as_bytes()));
    for &i in indices {
        s = splitmix64(s ^ splitmix64(i));
    }
    s
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `rng_from_seed(derive_seed(..))`.
pub fn substream(base: u64, tag: &str, indices: &[u64]) -> Rng {
    rng_from_seed(derive_seed(base, tag, indices))
}
