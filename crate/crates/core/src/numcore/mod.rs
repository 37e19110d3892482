//! Tensors, reverse-mode differentiation, the AdamW optimizer and the
//! plateau learning-rate schedule.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, PlateauConfig, PlateauScheduler};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Glorot/Xavier uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data)
}
