//! Seeded randomness shared by every generator in the crate.
//!
//! All streams are ChaCha8 seeded through `seed_from_u64`, which expands the
//! seed with PCG32 as documented by `rand_core`. Normal deviates come from
//! `rand_distr::StandardNormal` (ziggurat). Both are pure integer/IEEE code
//! paths, so a given seed reproduces the same bits on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier written into artifact metadata.
pub const RNG_NAME: &str = "ChaCha8Rng(rand_chacha 0.9, seed_from_u64) + StandardNormal(rand_distr 0.5)";

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a list of words: a SplitMix64 chain where
/// each word is xored into the running state before mixing.
pub fn hash64(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}
