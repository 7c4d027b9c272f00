//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Deterministic generator used for every seeded component.
pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut SeedRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, a)
}

pub fn uniform(rng: &mut SeedRng, shape: &[usize], a: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-a..=a))
}
