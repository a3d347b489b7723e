//! Seeded, splittable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type OpeRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> OpeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under the master `seed`. Per-task streams make
/// parallel runs reproduce sequential ones exactly.
pub fn stream(seed: u64, stream: u64) -> OpeRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a new master seed from `seed` and a label, for sub-experiments.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
