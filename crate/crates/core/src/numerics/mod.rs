//! Dense `f64` tensors, reverse-mode differentiation, optimization and checkpoints.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error, RELATIVE_ERROR_FLOOR};
pub use ops::{
    activation, dropout, layer_norm, masked_softmax, matmul, matmul_nt, Activation,
    DEFAULT_LEAKY_SLOPE, LAYER_NORM_EPS,
};
pub(crate) use ops::{dropout_mask, gemm, log_softmax_in_place, masked_softmax_in_place};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Xavier-uniform `rows × cols` matrix: U(−b, b) with `b = √(6/(fan_in+fan_out))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    xavier_uniform_fans(&[rows, cols], rows, cols, rng)
}

/// Xavier-uniform tensor of arbitrary shape with explicit fans.
pub fn xavier_uniform_fans(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
        .expect("shape matches length")
}

/// Tensor with N(0, std²) entries.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches length")
}
