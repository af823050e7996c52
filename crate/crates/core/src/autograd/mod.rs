//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass. Inputs enter as leaves; every
//! operation appends a node whose inputs already exist, so a single reverse
//! sweep visits each node once. Only bias-add broadcasts; everything else
//! requires matching shapes.

mod kernels;
mod tape;
mod tensor;

pub use tape::{log_sum_exp, softmax_into, OpKind, Tape, Var};
pub use tensor::{argmax, Tensor};

/// Central finite-difference gradient of a scalar function.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest discrepancy between two gradients: relative where the analytic
/// value exceeds `abs_floor` in magnitude, absolute otherwise.
pub fn max_gradient_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.abs() < abs_floor {
                (a - n).abs()
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}
