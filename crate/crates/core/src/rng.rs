//! Seed derivation.
//!
//! All randomness starts from one root seed. Sub-seeds are derived with
//! SplitMix64 over `(root, purpose, index)`, where the purpose string is
//! folded in with 64-bit FNV-1a. Streams are ChaCha8, which produces the same
//! sequence on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Bit set on every evaluation-episode seed and clear on every training seed.
pub const EVAL_SEED_BIT: u64 = 1 << 63;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(purpose)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_for(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn train_seed(root: u64, purpose: &str, index: u64) -> u64 {
    derive_seed(root, purpose, index) & !EVAL_SEED_BIT
}

pub fn eval_seed(root: u64, purpose: &str, index: u64) -> u64 {
    derive_seed(root, purpose, index) | EVAL_SEED_BIT
}

pub fn is_eval_seed(seed: u64) -> bool {
    seed & EVAL_SEED_BIT != 0
}
