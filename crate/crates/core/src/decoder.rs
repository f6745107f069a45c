//! MLP decoder over tied element embeddings, soft labels and cross-entropy.

use crate::error::{Error, Result};
use crate::numerics::{layer_norm, log_softmax_in_place, matmul, matmul_nt, Activation, CustomOp, Tape, Tensor, Var};

/// Label vector with `1 − ε` on `target` and `ε/(N−1)` elsewhere.
pub fn soft_labels(target: usize, n: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if target >= n {
        return Err(Error::Index(format!("target {target} of {n} classes")));
    }
    if n == 1 && epsilon > 0.0 {
        return Err(Error::InvalidArgument("label smoothing needs at least two classes".into()));
    }
    let off = if n > 1 { epsilon / (n - 1) as f64 } else { 0.0 };
    let mut y = vec![off; n];
    y[target] = 1.0 - epsilon;
    Ok(y)
}

/// Smallest probability fed to the logarithm in [`cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

/// `−Σ_t y_t log max(P_t, 1e-12)`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    Ok(-p.iter().zip(y).map(|(&p, &y)| y * p.max(LOG_CLAMP).ln()).sum::<f64>())
}

/// Plain-tensor decoder weights: affine → activation → layer norm → affine.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl DecoderParams {
    /// `MLP(x)` for a batch of rows.
    pub fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = matmul(x, &self.w1)?;
        add_row(&mut h, &self.b1);
        let h = crate::numerics::activation(self.activation, &h);
        let h = layer_norm(&h, &self.ln_gain, &self.ln_bias)?;
        let mut out = matmul(&h, &self.w2)?;
        add_row(&mut out, &self.b2);
        Ok(out)
    }
}

fn add_row(x: &mut Tensor, b: &Tensor) {
    let c = x.cols();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
}

/// `P = softmax(MLP(x) · Eᵀ + bias)` where `table` holds the `N` candidate
/// embeddings (the same storage used for input lookup).
pub fn decode_position(x: &[f64], decoder: &DecoderParams, table: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let h = decoder.mlp(&Tensor::new(vec![1, x.len()], x.to_vec())?)?;
    let mut logits = matmul_nt(&h, table)?;
    if bias.len() != table.rows() {
        return Err(Error::Shape(format!("bias of {} for {} candidates", bias.len(), table.rows())));
    }
    add_row(&mut logits, bias);
    let mut row = logits.into_data();
    log_softmax_in_place(&mut row);
    Ok(row.into_iter().map(f64::exp).collect())
}

/// Tape handles of the decoder trunk.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Shared trunk `MLP(x)` on the tape.
pub fn decoder_mlp(tape: &mut Tape, x: Var, dec: &DecoderVars, activation: Activation) -> Result<Var> {
    let h = tape.matmul(x, dec.w1)?;
    let h = tape.add_row(h, dec.b1)?;
    let h = tape.activation(h, activation);
    let h = tape.layer_norm(h, dec.ln_gain, dec.ln_bias)?;
    let h = tape.matmul(h, dec.w2)?;
    tape.add_row(h, dec.b2)
}

/// Logits `h · Eᵀ + bias` against a candidate table.
pub fn tied_logits(tape: &mut Tape, h: Var, table: Var, bias: Var) -> Result<Var> {
    let z = tape.matmul_nt(h, table)?;
    tape.add_row(z, bias)
}

struct SoftmaxCrossEntropy {
    labels: Tensor,
    log_probs: Tensor,
}

impl CustomOp for SoftmaxCrossEntropy {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        let mut d = self.log_probs.clone();
        for (v, y) in d.data_mut().iter_mut().zip(self.labels.data()) {
            *v = g * (v.exp() - y);
        }
        vec![Some(d)]
    }
}

/// Summed cross-entropy of row-wise softmax(`logits`) against soft `labels`.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: Tensor) -> Result<Var> {
    let z = tape.value(logits);
    if z.shape() != labels.shape() {
        return Err(Error::Shape(format!("logits {:?} vs labels {:?}", z.shape(), labels.shape())));
    }
    let mut log_probs = z.clone();
    let c = z.cols();
    for i in 0..z.rows() {
        log_softmax_in_place(&mut log_probs.data_mut()[i * c..(i + 1) * c]);
    }
    let loss: f64 = -log_probs.data().iter().zip(labels.data()).map(|(l, y)| l * y).sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy {loss}")));
    }
    Ok(tape.custom(vec![logits], Tensor::scalar(loss), Box::new(SoftmaxCrossEntropy { labels, log_probs })))
}

/// Row-wise log-probabilities of a logit matrix.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = out.cols();
    for i in 0..out.rows() {
        log_softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
    }
    out
}
