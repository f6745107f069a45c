//! Heterogeneous self-attention over fact sequences.
//!
//! Queries, keys and values use role-specific projections (node bias); scores
//! and values carry per-edge-type additive vectors (edge bias):
//!
//! ```text
//! γ_ij = (W^Q_role(i) x_i + b^Q_τij)·(W^K_role(j) x_j + b^K_τij) / √d_head
//! x̃_i  = Σ_j softmax_j(γ_ij) (W^V_role(j) x_j + b^V_τij)
//! ```
//!
//! Each encoder layer wraps this in dropout, residual, layer norm and a
//! position-wise feed-forward block.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hkg::{edge_type_matrix, EdgeType, HFact, RoleTag, Vocabulary, NUM_EDGE_TYPES, NUM_ROLES};
use crate::numerics::{gemm, masked_softmax_in_place, Activation, CustomOp, Tape, Tensor, Var};

/// A batch of padded, role-tagged sequences sharing one layout length.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub rows: usize,
    pub len: usize,
    /// Element ids, `rows × len`; MASK and PAD ids come from the role's vocabulary.
    pub elements: Vec<usize>,
    pub roles: Vec<RoleTag>,
    /// Edge-type indices for the shared `len × len` layout.
    pub edge_types: Vec<usize>,
    /// `roles != Pad`, `rows × len`.
    pub valid: Vec<bool>,
    /// Masked positions per row.
    pub masked: Vec<Vec<usize>>,
    /// True element at each masked position.
    pub targets: Vec<Vec<usize>>,
}

impl SequenceBatch {
    /// Lay out `(fact, masked positions)` queries, padded to the longest fact.
    pub fn new(queries: &[(&HFact, &[usize])], vocab: &Vocabulary) -> Result<Self> {
        let max_q = queries.iter().map(|(f, _)| f.qualifiers.len()).max().unwrap_or(0);
        Self::with_capacity(queries, vocab, max_q)
    }

    /// As [`SequenceBatch::new`] with an explicit qualifier capacity.
    pub fn with_capacity(queries: &[(&HFact, &[usize])], vocab: &Vocabulary, max_qualifiers: usize) -> Result<Self> {
        let len = 3 + 2 * max_qualifiers;
        let rows = queries.len();
        let mut elements = Vec::with_capacity(rows * len);
        let mut roles = Vec::with_capacity(rows * len);
        let mut masked = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        for (fact, positions) in queries {
            if fact.qualifiers.len() > max_qualifiers {
                return Err(Error::Capacity {
                    qualifiers: fact.qualifiers.len(),
                    max: max_qualifiers,
                });
            }
            let n = fact.num_positions();
            for (k, &p) in positions.iter().enumerate() {
                if p >= n || positions[..k].contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "masked position {p} invalid for a fact with {n} positions"
                    )));
                }
            }
            for p in 0..len {
                let role = RoleTag::of_position(p);
                if p >= n {
                    roles.push(RoleTag::Pad);
                    elements.push(if role.is_relation() {
                        vocab.relation_pad()
                    } else {
                        vocab.entity_pad()
                    });
                } else if positions.contains(&p) {
                    roles.push(role);
                    elements.push(if role.is_relation() {
                        vocab.relation_mask()
                    } else {
                        vocab.entity_mask()
                    });
                } else {
                    roles.push(role);
                    elements.push(fact.element(p));
                }
            }
            masked.push(positions.to_vec());
            targets.push(positions.iter().map(|&p| fact.element(p)).collect());
        }
        let valid = roles.iter().map(|&r| r != RoleTag::Pad).collect();
        let edge_types = edge_type_matrix(len)
            .into_iter()
            .map(|t| t.index().expect("full layout has no pad edges"))
            .collect();
        Ok(SequenceBatch {
            rows,
            len,
            elements,
            roles,
            edge_types,
            valid,
            masked,
            targets,
        })
    }

    /// Row of the flattened `rows·len` layout for `(row, position)`.
    pub fn flat(&self, row: usize, position: usize) -> usize {
        row * self.len + position
    }

    /// Per-token lookup rows: `(entity table row, relation table row)`; the
    /// other kind and padding are `None`.
    pub fn lookups(&self) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let ent = self
            .roles
            .iter()
            .zip(&self.elements)
            .map(|(r, &e)| r.is_entity().then_some(e))
            .collect();
        let rel = self
            .roles
            .iter()
            .zip(&self.elements)
            .map(|(r, &e)| r.is_relation().then_some(e))
            .collect();
        (ent, rel)
    }
}

/// `out_i = x_i · W_group(i)` with `W` stacked as `(groups·d_in) × d_out`.
/// Rows without a group produce zeros.
struct RoleLinear {
    groups: Rc<Vec<Option<usize>>>,
}

fn role_linear_forward(x: &Tensor, w: &Tensor, groups: &[Option<usize>]) -> Result<Tensor> {
    let (n, din) = (x.rows(), x.cols());
    if groups.len() != n || w.rows() % din != 0 {
        return Err(Error::Shape(format!(
            "role linear: x {:?}, w {:?}, {} role tags",
            x.shape(),
            w.shape(),
            groups.len()
        )));
    }
    let num_groups = w.rows() / din;
    let dout = w.cols();
    for (i, g) in groups.iter().enumerate() {
        if matches!(g, Some(g) if *g >= num_groups) {
            return Err(Error::Index(format!("row {i}: role group {} of {num_groups}", g.unwrap())));
        }
    }
    let mut out = Tensor::zeros(&[n, dout]);
    for g in 0..num_groups {
        let rows: Vec<usize> = (0..n).filter(|&i| groups[i] == Some(g)).collect();
        if rows.is_empty() {
            continue;
        }
        let xs: Vec<f64> = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
        let mut ys = vec![0.0; rows.len() * dout];
        let wg = &w.data()[g * din * dout..(g + 1) * din * dout];
        gemm(rows.len(), din, dout, &xs, false, wg, false, &mut ys, false);
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&ys[k * dout..(k + 1) * dout]);
        }
    }
    Ok(out)
}

impl CustomOp for RoleLinear {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, din, dout) = (x.rows(), x.cols(), w.cols());
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        for g in 0..w.rows() / din {
            let rows: Vec<usize> = (0..n).filter(|&i| self.groups[i] == Some(g)).collect();
            if rows.is_empty() {
                continue;
            }
            let xs: Vec<f64> = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            let gs: Vec<f64> = rows.iter().flat_map(|&i| grad.row(i).iter().copied()).collect();
            let wg = &w.data()[g * din * dout..(g + 1) * din * dout];
            let mut dxs = vec![0.0; rows.len() * din];
            gemm(rows.len(), dout, din, &gs, false, wg, true, &mut dxs, false);
            for (k, &i) in rows.iter().enumerate() {
                dx.row_mut(i).copy_from_slice(&dxs[k * din..(k + 1) * din]);
            }
            let dwg = &mut dw.data_mut()[g * din * dout..(g + 1) * din * dout];
            gemm(din, rows.len(), dout, &xs, true, &gs, false, dwg, false);
        }
        vec![Some(dx), Some(dw)]
    }
}

/// Role-selected projection recorded on the tape.
pub fn role_linear(tape: &mut Tape, x: Var, w: Var, groups: Rc<Vec<Option<usize>>>) -> Result<Var> {
    let out = role_linear_forward(tape.value(x), tape.value(w), &groups)?;
    Ok(tape.custom(vec![x, w], out, Box::new(RoleLinear { groups })))
}

/// Layout shared by every attention call on one batch.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub rows: usize,
    pub len: usize,
    pub heads: usize,
    pub edge_types: Rc<Vec<usize>>,
    pub valid: Rc<Vec<bool>>,
}

impl AttentionLayout {
    pub fn new(batch: &SequenceBatch, heads: usize) -> Self {
        AttentionLayout {
            rows: batch.rows,
            len: batch.len,
            heads,
            edge_types: Rc::new(batch.edge_types.clone()),
            valid: Rc::new(batch.valid.clone()),
        }
    }
}

struct EdgeAttention {
    layout: AttentionLayout,
    /// Attention weights `[((b·H + h)·L + i)·L + j]`.
    probs: Vec<f64>,
    has_bias: bool,
}

struct EdgeForward {
    out: Tensor,
    probs: Vec<f64>,
}

fn slice(t: &Tensor, row: usize, h: usize, dh: usize) -> &[f64] {
    &t.row(row)[h * dh..(h + 1) * dh]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (u, v) in y.iter_mut().zip(x) {
        *u += a * v;
    }
}

fn edge_forward(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<[&Tensor; 3]>, lay: &AttentionLayout) -> EdgeForward {
    let (l, heads, d) = (lay.len, lay.heads, q.cols());
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![0.0; lay.rows * heads * l * l];
    let zero = vec![0.0; dh];
    let mut qe = vec![0.0; dh];
    let mut ke = vec![0.0; dh];
    for b in 0..lay.rows {
        let valid = &lay.valid[b * l..(b + 1) * l];
        for h in 0..heads {
            for i in 0..l {
                if !valid[i] {
                    continue;
                }
                let qi = slice(q, b * l + i, h, dh);
                let base = ((b * heads + h) * l + i) * l;
                let row = &mut probs[base..base + l];
                for j in 0..l {
                    if !valid[j] {
                        continue;
                    }
                    let t = lay.edge_types[i * l + j];
                    let (bq, bk) = match bias {
                        Some([bq, bk, _]) => (slice(bq, t, h, dh), slice(bk, t, h, dh)),
                        None => (&zero[..], &zero[..]),
                    };
                    let kj = slice(k, b * l + j, h, dh);
                    for c in 0..dh {
                        qe[c] = qi[c] + bq[c];
                        ke[c] = kj[c] + bk[c];
                    }
                    row[j] = dot(&qe, &ke) * scale;
                }
                masked_softmax_in_place(row, |j| valid[j]);
                let orow = &mut out.row_mut(b * l + i)[h * dh..(h + 1) * dh];
                for j in 0..l {
                    let p = row[j];
                    if p == 0.0 {
                        continue;
                    }
                    axpy(orow, p, slice(v, b * l + j, h, dh));
                    if let Some([_, _, bv]) = bias {
                        axpy(orow, p, slice(bv, lay.edge_types[i * l + j], h, dh));
                    }
                }
            }
        }
    }
    EdgeForward { out, probs }
}

impl CustomOp for EdgeAttention {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let lay = &self.layout;
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let bias = self.has_bias.then(|| [inputs[3], inputs[4], inputs[5]]);
        let (l, heads, d) = (lay.len, lay.heads, q.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut db = bias.map(|[bq, _, _]| {
            [
                Tensor::zeros(bq.shape()),
                Tensor::zeros(bq.shape()),
                Tensor::zeros(bq.shape()),
            ]
        });
        let zero = vec![0.0; dh];
        let mut dp = vec![0.0; l];
        let mut qe = vec![0.0; dh];
        let mut ke = vec![0.0; dh];
        for b in 0..lay.rows {
            let valid = &lay.valid[b * l..(b + 1) * l];
            for h in 0..heads {
                for i in 0..l {
                    if !valid[i] {
                        continue;
                    }
                    let g = slice(grad, b * l + i, h, dh);
                    let base = ((b * heads + h) * l + i) * l;
                    let p = &self.probs[base..base + l];
                    let mut inner = 0.0;
                    for j in 0..l {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let t = lay.edge_types[i * l + j];
                        let mut val = dot(g, slice(v, b * l + j, h, dh));
                        if let Some([_, _, bv]) = bias {
                            val += dot(g, slice(bv, t, h, dh));
                        }
                        dp[j] = val;
                        inner += p[j] * val;
                        axpy(&mut dv.row_mut(b * l + j)[h * dh..(h + 1) * dh], p[j], g);
                        if let Some(db) = db.as_mut() {
                            axpy(&mut db[2].row_mut(t)[h * dh..(h + 1) * dh], p[j], g);
                        }
                    }
                    let qi = slice(q, b * l + i, h, dh);
                    for j in 0..l {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        let t = lay.edge_types[i * l + j];
                        let (bq, bk) = match bias {
                            Some([bq, bk, _]) => (slice(bq, t, h, dh), slice(bk, t, h, dh)),
                            None => (&zero[..], &zero[..]),
                        };
                        let kj = slice(k, b * l + j, h, dh);
                        for c in 0..dh {
                            qe[c] = qi[c] + bq[c];
                            ke[c] = kj[c] + bk[c];
                        }
                        axpy(&mut dq.row_mut(b * l + i)[h * dh..(h + 1) * dh], ds, &ke);
                        axpy(&mut dk.row_mut(b * l + j)[h * dh..(h + 1) * dh], ds, &qe);
                        if let Some(db) = db.as_mut() {
                            axpy(&mut db[0].row_mut(t)[h * dh..(h + 1) * dh], ds, &ke);
                            axpy(&mut db[1].row_mut(t)[h * dh..(h + 1) * dh], ds, &qe);
                        }
                    }
                }
            }
        }
        let mut out = vec![Some(dq), Some(dk), Some(dv)];
        if let Some([a, b, c]) = db {
            out.extend([Some(a), Some(b), Some(c)]);
        }
        out
    }
}

/// Edge-biased multi-head attention over already projected `q`, `k`, `v`
/// (`rows·len × d`). `bias` holds `[b^Q, b^K, b^V]`, each `14 × d`; head `h`
/// uses columns `h·d/H..(h+1)·d/H`. Padding queries yield zero rows.
pub fn edge_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<[Var; 3]>, layout: &AttentionLayout) -> Result<Var> {
    let (qt, kt, vt) = (tape.value(q), tape.value(k), tape.value(v));
    let d = qt.cols();
    let n = layout.rows * layout.len;
    if layout.heads == 0 || d % layout.heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {} heads", layout.heads)));
    }
    if qt.rows() != n || kt.shape() != qt.shape() || vt.shape() != qt.shape() || layout.valid.len() != n {
        return Err(Error::Shape(format!(
            "edge attention: q {:?}, k {:?}, v {:?} for {} tokens",
            qt.shape(),
            kt.shape(),
            vt.shape(),
            n
        )));
    }
    let bias_vals = match bias {
        Some([bq, bk, bv]) => {
            let b = [tape.value(bq), tape.value(bk), tape.value(bv)];
            if b.iter().any(|t| t.shape() != [NUM_EDGE_TYPES, d]) {
                return Err(Error::Shape(format!("edge bias must be {NUM_EDGE_TYPES}×{d}")));
            }
            Some(b)
        }
        None => None,
    };
    let f = edge_forward(qt, kt, vt, bias_vals, layout);
    let mut inputs = vec![q, k, v];
    if let Some(b) = bias {
        inputs.extend(b);
    }
    let op = EdgeAttention {
        layout: layout.clone(),
        probs: f.probs,
        has_bias: bias.is_some(),
    };
    Ok(tape.custom(inputs, f.out, Box::new(op)))
}

/// Attention weights of one head for one batch row, `len × len`, evaluated
/// from projected inputs.
pub fn edge_attention_weights(q: &Tensor, k: &Tensor, bias: Option<[&Tensor; 2]>, layout: &AttentionLayout, row: usize, head: usize) -> Tensor {
    let zero = Tensor::zeros(&[NUM_EDGE_TYPES, q.cols()]);
    let b = bias.map(|[bq, bk]| [bq, bk, &zero]);
    let f = edge_forward(q, k, k, b, layout);
    let l = layout.len;
    let base = (row * layout.heads + head) * l * l;
    Tensor::new(vec![l, l], f.probs[base..base + l * l].to_vec()).expect("square")
}

/// Plain-tensor weights of one heterogeneous attention layer. Projections are
/// `groups·d × d` stacks; biases are `14 × d`.
#[derive(Debug, Clone)]
pub struct HeteroAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bias: Option<[Tensor; 3]>,
    pub heads: usize,
}

fn group_of(role: RoleTag, groups: usize) -> Option<usize> {
    role.index().map(|r| if groups == 1 { 0 } else { r })
}

fn project(x: &Tensor, w: &Tensor, roles: &[RoleTag]) -> Result<Tensor> {
    let groups = w.rows() / x.cols();
    let g: Vec<Option<usize>> = roles.iter().map(|&r| group_of(r, groups)).collect();
    role_linear_forward(x, w, &g)
}

/// Scores `γ` (`L × L`) of one head for a single sequence `x` (`L × d`).
/// Entries involving a padding key are −∞.
pub fn hetero_attention_scores(x: &Tensor, roles: &[RoleTag], edge_types: &[EdgeType], params: &HeteroAttentionParams, head: usize) -> Result<Tensor> {
    let (q, k, _) = hetero_projections(x, roles, params)?;
    let l = x.rows();
    let dh = x.cols() / params.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let types = edge_type_indices(edge_types, l)?;
    let mut out = Tensor::full(&[l, l], f64::NEG_INFINITY);
    for i in 0..l {
        for j in 0..l {
            if roles[j] == RoleTag::Pad {
                continue;
            }
            let t = types[i * l + j];
            let mut s = 0.0;
            for c in 0..dh {
                let col = head * dh + c;
                let (bq, bk) = params.bias.as_ref().map_or((0.0, 0.0), |b| (b[0].at(t, col), b[1].at(t, col)));
                s += (q.at(i, col) + bq) * (k.at(j, col) + bk);
            }
            out.row_mut(i)[j] = s * scale;
        }
    }
    Ok(out)
}

/// Output slice (`L × d/H`) of one head given its scores `γ`.
pub fn hetero_attention_apply(gamma: &Tensor, x: &Tensor, roles: &[RoleTag], edge_types: &[EdgeType], params: &HeteroAttentionParams, head: usize) -> Result<Tensor> {
    let (_, _, v) = hetero_projections(x, roles, params)?;
    let l = x.rows();
    let dh = x.cols() / params.heads;
    let types = edge_type_indices(edge_types, l)?;
    let mut out = Tensor::zeros(&[l, dh]);
    for i in 0..l {
        let mut w = gamma.row(i).to_vec();
        if !masked_softmax_in_place(&mut w, |j| roles[j] != RoleTag::Pad) {
            continue;
        }
        for j in 0..l {
            if w[j] == 0.0 {
                continue;
            }
            let t = types[i * l + j];
            for c in 0..dh {
                let col = head * dh + c;
                let bv = params.bias.as_ref().map_or(0.0, |b| b[2].at(t, col));
                out.row_mut(i)[c] += w[j] * (v.at(j, col) + bv);
            }
        }
    }
    Ok(out)
}

fn hetero_projections(x: &Tensor, roles: &[RoleTag], p: &HeteroAttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    if roles.len() != x.rows() || p.heads == 0 || x.cols() % p.heads != 0 {
        return Err(Error::Shape(format!(
            "sequence {:?} with {} roles and {} heads",
            x.shape(),
            roles.len(),
            p.heads
        )));
    }
    Ok((project(x, &p.wq, roles)?, project(x, &p.wk, roles)?, project(x, &p.wv, roles)?))
}

fn edge_type_indices(types: &[EdgeType], l: usize) -> Result<Vec<usize>> {
    if types.len() != l * l {
        return Err(Error::Shape(format!("{} edge types for length {l}", types.len())));
    }
    // padding edges only touch masked keys or unused queries; any slot works
    Ok(types.iter().map(|t| t.index().unwrap_or(0)).collect())
}

/// Tape handles of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LocalLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `[b^Q, b^K, b^V]`; absent when edge bias is disabled.
    pub bias: Option<[Var; 3]>,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub heads: usize,
    pub dropout: f64,
    /// Feed-forward nonlinearity.
    pub activation: Activation,
    /// Separate projections per role; otherwise one shared projection.
    pub node_bias: bool,
}

/// Number of role-specific projection groups.
pub fn role_groups(node_bias: bool) -> usize {
    if node_bias {
        NUM_ROLES
    } else {
        1
    }
}

/// Encoder stack over token embeddings `x` (`rows·len × d`).
pub fn encoder_forward<R: Rng>(
    tape: &mut Tape,
    batch: &SequenceBatch,
    x: Var,
    layers: &[LocalLayerVars],
    settings: &LocalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let groups = role_groups(settings.node_bias);
    let tags: Rc<Vec<Option<usize>>> = Rc::new(batch.roles.iter().map(|&r| group_of(r, groups)).collect());
    let layout = AttentionLayout::new(batch, settings.heads);
    let mut x = x;
    for layer in layers {
        let q = role_linear(tape, x, layer.wq, Rc::clone(&tags))?;
        let k = role_linear(tape, x, layer.wk, Rc::clone(&tags))?;
        let v = role_linear(tape, x, layer.wv, Rc::clone(&tags))?;
        let att = edge_attention(tape, q, k, v, layer.bias, &layout)?;
        let att = tape.dropout(att, settings.dropout, training, rng)?;
        let res = tape.add(x, att)?;
        let h = tape.layer_norm(res, layer.ln1_gain, layer.ln1_bias)?;
        let f = tape.matmul(h, layer.ffn_w1)?;
        let f = tape.add_row(f, layer.ffn_b1)?;
        let f = tape.activation(f, settings.activation);
        let f = tape.matmul(f, layer.ffn_w2)?;
        let f = tape.add_row(f, layer.ffn_b2)?;
        let f = tape.dropout(f, settings.dropout, training, rng)?;
        let res = tape.add(h, f)?;
        x = tape.layer_norm(res, layer.ln2_gain, layer.ln2_bias)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hkg::edge_type;
    use crate::numerics::{finite_difference_gradient, layer_norm, matmul, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_labels((0..10).map(|i| format!("e{i}")).collect(), (0..6).map(|i| format!("r{i}")).collect()).unwrap()
    }

    fn params(rng: &mut ChaCha8Rng, d: usize, groups: usize, heads: usize, bias: bool) -> HeteroAttentionParams {
        HeteroAttentionParams {
            wq: random(rng, groups * d, d),
            wk: random(rng, groups * d, d),
            wv: random(rng, groups * d, d),
            bias: bias.then(|| [random(rng, 14, d), random(rng, 14, d), random(rng, 14, d)]),
            heads,
        }
    }

    /// Literal per-pair transcription of the score and update formulas.
    fn double_loop(x: &Tensor, roles: &[RoleTag], num_real: usize, p: &HeteroAttentionParams) -> Tensor {
        let (l, d) = (x.rows(), x.cols());
        let dh = d / p.heads;
        let groups = p.wq.rows() / d;
        let proj = |w: &Tensor, i: usize, col: usize| -> f64 {
            let g = if groups == 1 { 0 } else { roles[i].index().unwrap() };
            (0..d).map(|c| x.at(i, c) * w.at(g * d + c, col)).sum()
        };
        let b = |f: usize, i: usize, j: usize, col: usize| -> f64 {
            match &p.bias {
                Some(b) => b[f].at(edge_type(i, j, num_real).index().unwrap(), col),
                None => 0.0,
            }
        };
        let mut out = Tensor::zeros(&[l, d]);
        for h in 0..p.heads {
            for i in 0..num_real {
                let mut gamma = vec![0.0; num_real];
                for (j, g) in gamma.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += (proj(&p.wq, i, c) + b(0, i, j, c)) * (proj(&p.wk, j, c) + b(1, i, j, c));
                    }
                    *g = s / (dh as f64).sqrt();
                }
                let z: f64 = gamma.iter().map(|g| g.exp()).sum();
                for j in 0..num_real {
                    let w = gamma[j].exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        out.row_mut(i)[c] += w * (proj(&p.wv, j, c) + b(2, i, j, c));
                    }
                }
            }
        }
        out
    }

    fn single_batch(num_q: usize, max_q: usize) -> SequenceBatch {
        let mut f = HFact::triple(0, 0, 1);
        for k in 0..num_q {
            f = f.with_qualifier(1 + k, 2 + k);
        }
        SequenceBatch::with_capacity(&[(&f, &[])], &vocab(), max_q).unwrap()
    }

    fn tape_attention(x: &Tensor, batch: &SequenceBatch, p: &HeteroAttentionParams) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let groups = p.wq.rows() / x.cols();
        let tags = Rc::new(batch.roles.iter().map(|&r| group_of(r, groups)).collect::<Vec<_>>());
        let wq = tape.constant(p.wq.clone());
        let wk = tape.constant(p.wk.clone());
        let wv = tape.constant(p.wv.clone());
        let q = role_linear(&mut tape, xv, wq, Rc::clone(&tags)).unwrap();
        let k = role_linear(&mut tape, xv, wk, Rc::clone(&tags)).unwrap();
        let v = role_linear(&mut tape, xv, wv, tags).unwrap();
        let bias = p.bias.as_ref().map(|b| b.clone().map(|t| tape.constant(t)));
        let out = edge_attention(&mut tape, q, k, v, bias, &AttentionLayout::new(batch, p.heads)).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn vectorized_matches_double_loop() {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let heads = [1, 2, 4][trial as usize % 3];
            let d = heads * rng.random_range(1..4);
            let max_q = rng.random_range(0..4);
            let num_q = rng.random_range(0..=max_q);
            let batch = single_batch(num_q, max_q);
            let x = random(&mut rng, batch.len, d);
            let p = params(&mut rng, d, if trial % 2 == 0 { 5 } else { 1 }, heads, trial % 4 != 3);
            let got = tape_attention(&x, &batch, &p);
            let want = double_loop(&x, &batch.roles, 3 + 2 * num_q, &p);
            assert!(got.max_abs_diff(&want) < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn per_head_functions_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = single_batch(1, 2);
        let types = edge_type_matrix(batch.len);
        let real_types: Vec<EdgeType> = (0..batch.len)
            .flat_map(|i| (0..batch.len).map(move |j| edge_type(i, j, 5)))
            .collect();
        let p = params(&mut rng, 4, 5, 2, true);
        let x = random(&mut rng, batch.len, 4);
        let want = double_loop(&x, &batch.roles, 5, &p);
        for h in 0..2 {
            for t in [&types, &real_types] {
                let gamma = hetero_attention_scores(&x, &batch.roles, t, &p, h).unwrap();
                let out = hetero_attention_apply(&gamma, &x, &batch.roles, t, &p, h).unwrap();
                for i in 0..5 {
                    for c in 0..2 {
                        assert!((out.at(i, c) - want.at(i, h * 2 + c)).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn bias_only_scores_depend_on_edge_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = single_batch(2, 2);
        let p = params(&mut rng, 4, 5, 1, true);
        let x = Tensor::zeros(&[7, 4]);
        let types = edge_type_matrix(7);
        let gamma = hetero_attention_scores(&x, &batch.roles, &types, &p, 0).unwrap();
        let b = p.bias.as_ref().unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let t = types[i * 7 + j].index().unwrap();
                let want: f64 = (0..4).map(|c| b[0].at(t, c) * b[1].at(t, c)).sum::<f64>() / 2.0;
                assert!((gamma.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = single_batch(1, 1);
        let p = params(&mut rng, 4, 1, 1, false);
        let row = random(&mut rng, 1, 4);
        let x = Tensor::from_rows(&vec![row.row(0).to_vec(); 5]).unwrap();
        let layout = AttentionLayout::new(&batch, 1);
        let q = matmul(&x, &p.wq).unwrap();
        let k = matmul(&x, &p.wk).unwrap();
        let w = edge_attention_weights(&q, &k, None, &layout, 0, 0);
        for v in w.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_valid_position_outputs_its_value() {
        // a batch of one token is impossible, so mask all but one key by hand
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut batch = single_batch(0, 0);
        let p = params(&mut rng, 4, 5, 2, true);
        let x = random(&mut rng, 3, 4);
        batch.valid = vec![false, true, false];
        batch.roles = vec![RoleTag::Pad, RoleTag::R, RoleTag::Pad];
        let out = tape_attention(&x, &batch, &p);
        // value of token 1 (role R → group 1) plus self-loop bias
        let wv_r = Tensor::new(vec![4, 4], p.wv.data()[16..32].to_vec()).unwrap();
        let val = matmul(&Tensor::new(vec![1, 4], x.row(1).to_vec()).unwrap(), &wv_r).unwrap();
        let t = EdgeType::SelfLoop.index().unwrap();
        for c in 0..4 {
            let want = val.at(0, c) + p.bias.as_ref().unwrap()[2].at(t, c);
            assert!((out.at(1, c) - want).abs() < 1e-12);
        }
        assert!(out.row(0).iter().chain(out.row(2)).all(|&v| v == 0.0));
    }

    #[test]
    fn pad_keys_get_zero_weight_and_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let batch = single_batch(1, 3);
        let p = params(&mut rng, 6, 5, 3, true);
        let mut x = random(&mut rng, batch.len, 6);
        let tags: Vec<Option<usize>> = batch.roles.iter().map(|r| r.index()).collect();
        let q = role_linear_forward(&x, &p.wq, &tags).unwrap();
        let k = role_linear_forward(&x, &p.wk, &tags).unwrap();
        let layout = AttentionLayout::new(&batch, 3);
        for h in 0..3 {
            let w = edge_attention_weights(&q, &k, Some([&p.bias.as_ref().unwrap()[0], &p.bias.as_ref().unwrap()[1]]), &layout, 0, h);
            for i in 0..batch.len {
                for j in 5..batch.len {
                    assert_eq!(w.at(i, j), 0.0);
                }
            }
        }
        let before = tape_attention(&x, &batch, &p);
        for i in 5..batch.len {
            x.row_mut(i).iter_mut().for_each(|v| *v = 100.0);
        }
        let after = tape_attention(&x, &batch, &p);
        assert_eq!(before, after);
    }

    #[derive(Clone)]
    struct Layer {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        bias: Option<[Tensor; 3]>,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        g1: Tensor,
        c1: Tensor,
        g2: Tensor,
        c2: Tensor,
    }

    fn layer(rng: &mut ChaCha8Rng, d: usize, hidden: usize, groups: usize, bias: bool) -> Layer {
        let vec = |rng: &mut ChaCha8Rng, n: usize| Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Layer {
            wq: random(rng, groups * d, d),
            wk: random(rng, groups * d, d),
            wv: random(rng, groups * d, d),
            bias: bias.then(|| [random(rng, 14, d), random(rng, 14, d), random(rng, 14, d)]),
            w1: random(rng, d, hidden),
            b1: vec(rng, hidden),
            w2: random(rng, hidden, d),
            b2: vec(rng, d),
            g1: vec(rng, d),
            c1: vec(rng, d),
            g2: vec(rng, d),
            c2: vec(rng, d),
        }
    }

    fn bind(tape: &mut Tape, l: &Layer) -> LocalLayerVars {
        LocalLayerVars {
            wq: tape.variable(l.wq.clone()),
            wk: tape.variable(l.wk.clone()),
            wv: tape.variable(l.wv.clone()),
            bias: l.bias.as_ref().map(|b| b.clone().map(|t| tape.variable(t))),
            ffn_w1: tape.variable(l.w1.clone()),
            ffn_b1: tape.variable(l.b1.clone()),
            ffn_w2: tape.variable(l.w2.clone()),
            ffn_b2: tape.variable(l.b2.clone()),
            ln1_gain: tape.variable(l.g1.clone()),
            ln1_bias: tape.variable(l.c1.clone()),
            ln2_gain: tape.variable(l.g2.clone()),
            ln2_bias: tape.variable(l.c2.clone()),
        }
    }

    fn settings(heads: usize, node_bias: bool) -> LocalSettings {
        LocalSettings {
            heads,
            dropout: 0.0,
            activation: Activation::Gelu,
            node_bias,
        }
    }

    fn run_encoder(batch: &SequenceBatch, x: &Tensor, layers: &[Layer], s: &LocalSettings) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars: Vec<LocalLayerVars> = layers.iter().map(|l| bind(&mut tape, l)).collect();
        let out = encoder_forward(&mut tape, batch, xv, &vars, s, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.value(out).clone()
    }

    /// Textbook encoder layer: unbiased multi-head scaled dot-product attention
    /// (no output projection), residual, norm, feed-forward, residual, norm.
    fn vanilla_layer(x: &Tensor, l: &Layer, heads: usize) -> Tensor {
        let (n, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let (q, k, v) = (matmul(x, &l.wq).unwrap(), matmul(x, &l.wk).unwrap(), matmul(x, &l.wv).unwrap());
        let mut att = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for j in 0..n {
                    for c in 0..dh {
                        att.row_mut(i)[h * dh + c] += (s[j] - m).exp() / z * v.at(j, h * dh + c);
                    }
                }
            }
        }
        let mut r1 = x.clone();
        r1.add_assign(&att);
        let h1 = layer_norm(&r1, &l.g1, &l.c1).unwrap();
        let mut f = matmul(&h1, &l.w1).unwrap();
        for i in 0..n {
            for (c, e) in f.row_mut(i).iter_mut().enumerate() {
                *e = Activation::Gelu.apply(*e + l.b1.data()[c]);
            }
        }
        let mut f = matmul(&f, &l.w2).unwrap();
        for i in 0..n {
            for (c, e) in f.row_mut(i).iter_mut().enumerate() {
                *e += l.b2.data()[c] + h1.at(i, c);
            }
        }
        layer_norm(&f, &l.g2, &l.c2).unwrap()
    }

    #[test]
    fn unbiased_layer_matches_vanilla_encoder() {
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let heads = [1, 2, 4][trial as usize % 3];
            let d = heads * rng.random_range(1..4);
            let num_q = rng.random_range(0..3);
            let batch = single_batch(num_q, num_q);
            let x = random(&mut rng, batch.len, d);
            let l = layer(&mut rng, d, 2 * d, 1, false);
            let got = run_encoder(&batch, &x, std::slice::from_ref(&l), &settings(heads, false));
            let want = vanilla_layer(&x, &l, heads);
            assert!(got.max_abs_diff(&want) < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn zero_layers_return_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let batch = single_batch(1, 2);
        let x = random(&mut rng, batch.len, 4);
        assert_eq!(run_encoder(&batch, &x, &[], &settings(2, true)), x);
    }

    /// Apply the qualifier swap `perm` to the rows of one sequence.
    fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).to_vec()).collect();
        for &q in perm {
            rows.push(x.row(3 + 2 * q).to_vec());
            rows.push(x.row(4 + 2 * q).to_vec());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn qualifier_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = single_batch(3, 3);
        let layers: Vec<Layer> = (0..2).map(|_| layer(&mut rng, 8, 16, 5, true)).collect();
        let x = random(&mut rng, batch.len, 8);
        let perm = [2, 0, 1];
        let out = run_encoder(&batch, &x, &layers, &settings(2, true));
        let out_perm = run_encoder(&batch, &permute_rows(&x, &perm), &layers, &settings(2, true));
        assert!(out_perm.max_abs_diff(&permute_rows(&out, &perm)) < 1e-10);
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let batch = single_batch(2, 2);
        assert_eq!(batch.len, 7);
        let base = layer(&mut rng, 8, 12, 5, true);
        let x0 = random(&mut rng, 7, 8);
        let probe = random(&mut rng, 7, 8);
        let s = settings(2, true);
        let loss = |x: &Tensor, l: &Layer| -> (Tape, Var, Var, LocalLayerVars) {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let vars = bind(&mut tape, l);
            let out = encoder_forward(&mut tape, &batch, xv, &[vars], &s, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let pv = tape.constant(probe.clone());
            let o = tape.matmul_nt(out, pv).unwrap();
            let o = tape.activation(o, Activation::Tanh);
            let o = tape.sum(o);
            (tape, o, xv, vars)
        };
        let value = |x: &Tensor, l: &Layer| {
            let (tape, o, _, _) = loss(x, l);
            tape.value(o).data()[0]
        };
        let (tape, o, xv, vars) = loss(&x0, &base);
        let grads = tape.backward(o).unwrap();
        let numeric = finite_difference_gradient(|x| value(x, &base), &x0, 1e-5);
        assert!(max_relative_error(grads.get(xv).unwrap(), &numeric) < 1e-4);
        type Setter = fn(&mut Layer, &Tensor);
        let cases: Vec<(Var, fn(&Layer) -> Tensor, Setter)> = vec![
            (vars.wq, |l| l.wq.clone(), |l, t| l.wq = t.clone()),
            (vars.wk, |l| l.wk.clone(), |l, t| l.wk = t.clone()),
            (vars.wv, |l| l.wv.clone(), |l, t| l.wv = t.clone()),
            (vars.bias.unwrap()[0], |l| l.bias.as_ref().unwrap()[0].clone(), |l, t| l.bias.as_mut().unwrap()[0] = t.clone()),
            (vars.bias.unwrap()[1], |l| l.bias.as_ref().unwrap()[1].clone(), |l, t| l.bias.as_mut().unwrap()[1] = t.clone()),
            (vars.bias.unwrap()[2], |l| l.bias.as_ref().unwrap()[2].clone(), |l, t| l.bias.as_mut().unwrap()[2] = t.clone()),
            (vars.ffn_w1, |l| l.w1.clone(), |l, t| l.w1 = t.clone()),
            (vars.ffn_b2, |l| l.b2.clone(), |l, t| l.b2 = t.clone()),
            (vars.ln1_gain, |l| l.g1.clone(), |l, t| l.g1 = t.clone()),
            (vars.ln2_bias, |l| l.c2.clone(), |l, t| l.c2 = t.clone()),
        ];
        for (var, get, set) in cases {
            let numeric = finite_difference_gradient(
                |t| {
                    let mut l = base.clone();
                    set(&mut l, t);
                    value(&x0, &l)
                },
                &get(&base),
                1e-5,
            );
            let err = max_relative_error(grads.get(var).unwrap(), &numeric);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn batch_layout_marks_mask_and_pad() {
        let v = vocab();
        let f1 = HFact::triple(0, 1, 2).with_qualifier(3, 4);
        let f2 = HFact::triple(5, 0, 6);
        let b = SequenceBatch::new(&[(&f1, &[4]), (&f2, &[1])], &v).unwrap();
        assert_eq!((b.rows, b.len), (2, 5));
        assert_eq!(b.elements[4], v.entity_mask());
        assert_eq!(b.elements[5 + 1], v.relation_mask());
        assert_eq!(&b.roles[8..], &[RoleTag::Pad, RoleTag::Pad]);
        assert_eq!(&b.elements[8..], &[v.relation_pad(), v.entity_pad()]);
        assert_eq!(b.targets, vec![vec![4], vec![0]]);
        let (ent, rel) = b.lookups();
        assert_eq!(ent[0], Some(0));
        assert_eq!(rel[0], None);
        assert_eq!(rel[1], Some(1));
        assert_eq!(ent[8], None);
        assert!(SequenceBatch::new(&[(&f2, &[3])], &v).is_err());
    }
}
