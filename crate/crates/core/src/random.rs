//! Seeded random arrays. All randomness in the crate flows through
//! `ChaCha8Rng` so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::DenseArray;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> DenseArray {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    let mut a = DenseArray::zeros(shape);
    a.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    a
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let dist = Uniform::new(lo, hi);
    let mut a = DenseArray::zeros(shape);
    a.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    a
}
