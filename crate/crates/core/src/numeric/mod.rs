//! Minimal dense-network engine: matrices, multi-layer perceptrons with
//! analytic gradients, Adam, seeded random streams and a binary codec.
//!
//! Everything runs in `f64`.

mod adam;
pub mod codec;
mod matrix;
mod mlp;
mod rng;

pub use adam::{Adam, AdamConfig};
pub use matrix::Matrix;
pub use mlp::{Activation, ForwardCache, Gradients, Layer, Mlp, MlpSpec};
pub use rng::{Rng, RngState};

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Euclidean distance, summed left to right.
#[inline]
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}
