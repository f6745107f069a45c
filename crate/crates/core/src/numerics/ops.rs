//! Dense kernels on plain tensors. The tape in [`super::tape`] records these
//! and supplies their gradients.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// `c (+)= op(a) · op(b)` for row-major buffers, where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // Strides of the logical (post-transpose) operands.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (asserted above)
    // and the strides describe row-major layouts of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul_nt {:?} x {:?}ᵀ: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// In-place softmax over the entries where `valid` is true; others become 0.
/// Returns false when no entry is valid.
pub(crate) fn masked_softmax_in_place(scores: &mut [f64], valid: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        if valid(i) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        scores.fill(0.0);
        return false;
    }
    let mut total = 0.0;
    for (i, s) in scores.iter_mut().enumerate() {
        if valid(i) {
            *s = (*s - max).exp();
            total += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
    true
}

/// Softmax restricted to `valid` entries, with max subtraction.
pub fn masked_softmax(scores: &Tensor, valid: &[bool]) -> Result<Tensor> {
    if valid.len() != scores.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs {} scores",
            valid.len(),
            scores.len()
        )));
    }
    let mut out = scores.clone();
    if !masked_softmax_in_place(out.data_mut(), |i| valid[i]) {
        return Err(Error::InvalidArgument("masked_softmax: no valid entry".into()));
    }
    Ok(out)
}

/// Log-softmax over a full row.
pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Relu,
    /// ELU with α = 1.
    Elu,
    /// Exact (erf-based) GELU.
    Gelu,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative with respect to the input `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)),
            other => {
                if let Some(arg) = other
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let slope = arg.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("bad leaky_relu slope {arg:?}"))
                    })?;
                    return Ok(Activation::LeakyRelu(slope));
                }
                Err(Error::InvalidArgument(format!("unknown activation {other:?}")))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Elu => write!(f, "elu"),
            Activation::Gelu => write!(f, "gelu"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = kind.apply(*v);
    }
    out
}

/// Inverted-dropout keep mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let scale = 1.0 / (1.0 - rate);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}

/// Per-row normalization statistics: `(x̂, 1/σ)`.
pub(crate) fn normalize_rows(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, d) = (x.rows(), x.cols());
    let mut xhat = vec![0.0; r * d];
    let mut inv = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[i] = is;
        for (o, v) in xhat[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

/// Layer normalization over the last axis (ε = 1e-5) followed by `gain·x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm: width {d}, gain {}, bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let (xhat, _) = normalize_rows(x);
    let mut out = xhat;
    for row in out.chunks_mut(d) {
        for ((o, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
