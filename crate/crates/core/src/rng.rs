//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from ChaCha8 keyed by a 64-bit
//! seed. Independent streams for parallel work are obtained by selecting a
//! ChaCha stream number (`set_stream`), so stream `i` of seed `s` never
//! overlaps stream `j` of the same seed. Replication seeds are derived with
//! SplitMix64 so they depend only on the base seed and the replication index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recorded in run metadata so outputs can be tied to the generator used.
pub const RNG_ALGORITHM: &str = "chacha8";

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer applied to `base + index * golden`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw on [0, 1) with 53 bits of resolution.
#[inline]
pub fn unit_f64(rng: &mut Rng) -> f64 {
    use rand::RngCore;
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
