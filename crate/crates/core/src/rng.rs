//! Counter-based random streams.
//!
//! Every random draw in training is taken from a ChaCha8 stream whose key is
//! `(seed, step, purpose)` and whose stream id is `(datapoint, sample)`, so
//! draws are reproducible regardless of evaluation order or resumption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Latent = 2,
    Gumbel = 3,
    Batch = 4,
    Split = 5,
    Eval = 6,
    Synthetic = 7,
    Oracle = 8,
}

/// Stream for one `(datapoint, sample)` pair under `(seed, step, purpose)`.
pub fn stream(seed: u64, step: u64, purpose: Purpose, datapoint: u64, sample: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((datapoint << 32) ^ sample);
    rng
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
