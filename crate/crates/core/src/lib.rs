//! Adversarial-bug laboratory: a small autodiff engine, desk-scale
//! classifiers and ensembles, attacks, the ensemble-normalized
//! Jensen–Shannon metric and dataset distillation on synthetic data.

pub mod attacks;
pub mod autograd;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
