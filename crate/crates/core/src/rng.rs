//! Seed derivation. Each random stream in the crate is a ChaCha generator
//! seeded by mixing a user seed with stream coordinates, so generation order
//! never affects the numbers drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the substream seed for `(seed, index)`.
pub fn substream(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Named streams within one substream.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Motion = 1,
    Shots = 2,
    Observations = 3,
    Init = 4,
    Weights = 5,
    Shuffle = 6,
}

pub fn stream_rng(seed: u64, index: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(substream(seed, index), stream as u64))
}
