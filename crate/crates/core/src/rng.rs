//! Splittable deterministic seeding.
//!
//! Every independent random stream (one per scene, one per expert, ...) is
//! derived from a master seed and a stream index, so work can be reordered or
//! parallelized without changing any drawn value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of substream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0xA5A5_A5A5)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(master: u64, index: u64) -> Rng {
    seeded(derive_seed(master, index))
}

/// Reserved stream indices. Scene streams use the scene index directly.
pub(crate) mod streams {
    pub const EMBEDDINGS: u64 = u64::MAX;
    pub const RESAMPLE: u64 = u64::MAX - 1;
    pub const BATCHES: u64 = u64::MAX - 2;
    pub const UNDERSAMPLE: u64 = u64::MAX - 3;
    pub const MOE_BATCHES: u64 = u64::MAX - 4;
}
