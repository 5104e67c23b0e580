//! Seeded, platform-independent randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stream index into a base seed (splitmix64 finalizer), so that
/// per-sample or per-epoch streams are independent of iteration order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut SeededRng, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
    let mut t = Tensor::zeros(dims)?;
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    Ok(t)
}

pub fn uniform(rng: &mut SeededRng, dims: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Result<Tensor> {
    let mut t = Tensor::zeros(dims)?;
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    Ok(t)
}
