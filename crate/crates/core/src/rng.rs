//! Seeded, portable random number generation.
//!
//! Every stochastic stage (augmentation, initialization, shuffling, scene
//! synthesis) draws from ChaCha8. Its output stream is fixed by the seed and
//! independent of platform and pointer width, so results are bit-reproducible.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as PortableRng;

/// Builds the generator for a 64-bit seed.
pub fn seeded(seed: u64) -> PortableRng {
    PortableRng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream index.
///
/// SplitMix64 finalizer over the combined value.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for child stream `stream` of `seed`.
pub fn child(seed: u64, stream: u64) -> PortableRng {
    seeded(derive_seed(seed, stream))
}
