//! Seed derivation and the pinned random generator.
//!
//! All randomness flows from one master seed. A child seed is
//! `splitmix64(master ^ fnv1a64(tag) ^ splitmix64(index))`, and every stream
//! is a ChaCha8 generator seeded from a child seed via `seed_from_u64`.
//! Reimplementations that want matching traces must use the same mix and the
//! same generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for stream `tag`, item `index`, under `master`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()) ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, tag: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(master, tag, index))
}
