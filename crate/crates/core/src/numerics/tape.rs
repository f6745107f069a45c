//! Reverse-mode differentiation over a linear tape.
//!
//! Each recorded node stores its forward value and enough context to push a
//! gradient back to its inputs. Model-specific fused kernels plug in through
//! [`CustomOp`].

use rand::Rng;

use super::ops::{self, Activation};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    /// Gradients for each input, given the inputs, the forward output and the
    /// output gradient. `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<Option<usize>>),
    SliceRows(Var, usize),
    RowSelect {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not bound to a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter; gradients reach it when it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Add a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return shape_err(format!("add_row {:?} + {:?}", vx.shape(), vb.shape()));
        }
        let mut v = vx.clone();
        for row in v.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e *= c;
        }
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = ops::activation(kind, self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Act(x, kind), rg)
    }

    /// Inverted dropout; identity when `rate == 0` or outside training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).len(), rate, rng)?;
        let mut v = self.value(x).clone();
        for (e, m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout(x, mask), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let (xhat, inv_std) = ops::normalize_rows(self.value(x));
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Select rows of `table`; `None` yields a zero row that receives no gradient.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows.len() * c];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= n {
                    return Err(Error::Index(format!("gather row {r} of {n}")));
                }
                out[i * c..(i + 1) * c].copy_from_slice(t.row(r));
            }
        }
        let v = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(table);
        Ok(self.push(v, Op::Gather(table, rows), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::Index(format!("slice {start}..{end} of {} rows", t.rows())));
        }
        let c = t.cols();
        let v = Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows(x, start), rg))
    }

    /// Row `i` of the output comes from `a` when `take_a[i]`, else from `b`.
    pub fn row_select(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || take_a.len() != va.rows() {
            return shape_err(format!(
                "row_select {:?} / {:?} with {} flags",
                va.shape(),
                vb.shape(),
                take_a.len()
            ));
        }
        let mut v = vb.clone();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                v.row_mut(i).copy_from_slice(va.row(i));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::RowSelect { a, b, take_a }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// Record a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(inputs, op), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.push_back(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            debug_assert_eq!(t.len(), self.value(v).len());
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t.reshape(self.value(v).shape().to_vec()).expect("grad shape")),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g.data(), false, vb.data(), false, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    ops::gemm(n, m, k, g.data(), true, va.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::new(vec![c], db).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let mut t = g.clone();
                for e in t.data_mut() {
                    *e *= c;
                }
                acc(*x, t);
            }
            Op::Act(x, kind) => {
                let mut t = g.clone();
                for (e, xi) in t.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *e *= kind.derivative(*xi);
                }
                acc(*x, t);
            }
            Op::Dropout(x, mask) => {
                let mut t = g.clone();
                for (e, m) in t.data_mut().iter_mut().zip(mask) {
                    *e *= m;
                }
                acc(*x, t);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    acc(*gain, Tensor::new(vec![d], dg).unwrap());
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    acc(*bias, Tensor::new(vec![d], db).unwrap());
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, ((gr, xr), out)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        let inv = inv_std[i];
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            out[j] = inv * (dxh - s1 / d as f64 - xr[j] * s2 / d as f64);
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Gather(table, rows) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = *r {
                        for (d, v) in dt.row_mut(r).iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *d += v;
                        }
                    }
                }
                acc(*table, dt);
            }
            Op::SliceRows(x, start) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                dt.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, dt);
            }
            Op::RowSelect { a, b, take_a } => {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (i, &t) in take_a.iter().enumerate() {
                    if t {
                        gb.row_mut(i).fill(0.0);
                    } else {
                        ga.row_mut(i).fill(0.0);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.data()[0]));
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = op.backward(&vals, &node.value, g);
                debug_assert_eq!(outs.len(), inputs.len());
                for (v, t) in inputs.iter().zip(outs) {
                    if let Some(t) = t {
                        acc(*v, t);
                    }
                }
            }
        }
    }

    /// Parameters bound on this tape, with their node handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add gradients of every parameter bound on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (id, var) in tape.bound_params() {
            if let Some(g) = self.get(var) {
                let p = store.get_mut(id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}
