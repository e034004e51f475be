#![allow(dead_code)]

use mmvq_autodiff::{Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Uniform values bounded away from zero (for relu / signed sqrt checks).
pub fn away_from_zero<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.random_range(0.15..1.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        T::from_f64_lossy(sign * mag)
    })
}

/// Reduces `v` to a scalar via a fixed random projection so that every
/// output coordinate gets a distinct weight.
pub fn project<T: Scalar>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = uniform::<T>(tape.shape(v), &mut r);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}
