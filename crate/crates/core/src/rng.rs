//! Portable seeded randomness. Every stream is a xoshiro256++ generator
//! seeded through SplitMix64, so equal seeds reproduce across platforms.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::Tensor;

pub type Prng = Xoshiro256PlusPlus;

pub fn prng(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Derives an independent stream for `label` under a master seed.
pub fn derive(seed: u64, label: &str) -> Prng {
    // FNV-1a over the label, mixed into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    prng(seed ^ h.rotate_left(17))
}

pub fn normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(rng: &mut Prng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * normal(rng))
}
