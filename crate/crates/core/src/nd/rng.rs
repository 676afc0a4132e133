//! Seeded random streams.
//!
//! Every run owns one 64-bit seed. Each consumer (data generation, weight
//! initialization, minibatch order, reparameterization noise, evaluation)
//! gets its own ChaCha8 stream derived from that seed, so changing how much
//! randomness one component draws never shifts the others.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type RunRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Minibatch = 3,
    Noise = 4,
    Eval = 5,
    Split = 6,
}

/// Independent stream for `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}
