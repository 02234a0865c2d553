//! Seeded, counter-based randomness. Every stochastic routine takes an
//! explicit `&mut Rng`.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;
use crate::tensor::Tensor;

pub use rand::Rng as RngExt;

/// ChaCha8 keystream generator.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under the same seed.
pub fn seeded_stream(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<T: Float>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn uniform<T: Float>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape")
}
