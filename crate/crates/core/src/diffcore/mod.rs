//! Minimal reverse-mode differentiation over vectors and small matrices.
//!
//! A [`Graph`] records operations against a borrowed [`ParamStore`];
//! [`Graph::backward`] returns [`Gradients`] which are then folded into the
//! store with [`ParamStore::accumulate`] (so repeated passes accumulate until
//! [`ParamStore::zero_grads`] or an optimizer step clears them).

mod check;
mod graph;
mod optim;
mod params;

pub use check::finite_diff_check;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, ParamGroup};
pub use params::{
    Checkpoint, CheckpointEntry, ParamGrad, ParamId, ParamStore, ParamTensor, CHECKPOINT_VERSION,
};

use rand::Rng;

/// Uniform values in `[-limit, limit]`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

/// Glorot-style limit `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
