//! Seeded random streams.
//!
//! Every stochastic step in the crate draws from a ChaCha8 generator seeded
//! from a `u64`, so runs replay bit-for-bit on any platform. Independent
//! streams are derived by mixing a purpose tag into the seed rather than by
//! sharing one generator across unrelated consumers.

use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Generator for `seed`.
pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of `seed`.
///
/// The tag and index are folded in with a SplitMix64 finalizer so nearby
/// seeds and indices give unrelated streams.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One draw from N(0, 1), generated in `f64` and rounded to `T`.
#[inline]
pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::lit(x)
}

/// `n` draws from N(0, σ²).
pub fn normal_vec<T: Scalar>(rng: &mut Rng, n: usize, sigma: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x * sigma)
        })
        .collect()
}
