//! Seed derivation so per-user and per-category work is reproducible no
//! matter which worker runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one (user, category) fit, stable across runs and platforms.
pub fn derive_seed(global: u64, user_id: &str, category: Option<&str>) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &global.to_le_bytes());
    h = fnv1a(h, user_id.as_bytes());
    // separator keeps ("ab", None) and ("a", Some("b")) apart
    h = fnv1a(h, &[0xff]);
    if let Some(c) = category {
        h = fnv1a(h, c.as_bytes());
    }
    mix64(h)
}

/// Seed for the `index`-th stream under `global`.
pub fn stream_seed(global: u64, index: u64) -> u64 {
    mix64(global ^ mix64(index.wrapping_add(1)))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
