//! Seeded randomness shared by every module.
//!
//! All randomness flows through xoshiro256** seeded with SplitMix64 expansion
//! of a 64-bit seed (the `seed_from_u64` of `rand_xoshiro`). Uniform indices are
//! drawn with the multiply-high reduction `(next_u64() * n) >> 64`, so a port
//! in another language only needs the generator and this one formula to
//! reproduce maze topologies.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Uniform index in `0..n`. `n` must be non-zero.
pub fn bounded_index(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Uniform float in `[0, 1)` with 53 random bits.
pub fn unit_f64(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `base`, e.g. one per epoch.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)).wrapping_add(index))
}

/// In-place Fisher-Yates shuffle driven by [`bounded_index`].
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = bounded_index(rng, i + 1);
        items.swap(i, j);
    }
}
