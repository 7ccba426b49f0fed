//! Deterministic random streams.
//!
//! Every stochastic decision (data order, crops, latent noise, tile
//! positions, flow-matching draws) is keyed by `(seed, step, index)` so a run
//! is reproducible regardless of how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one `(seed, step, index)` triple.
pub fn stream(seed: u64, step: u64, index: u64) -> StreamRng {
    let k = splitmix(splitmix(splitmix(seed) ^ step) ^ index.wrapping_mul(0xA24B_AED4_963E_E407));
    ChaCha8Rng::seed_from_u64(k)
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::lit(v)
}

pub fn normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}
