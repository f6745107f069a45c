//! Hypergraph dual-attention: nodes → hyperedges (N-to-H), then hyperedges → nodes (H-to-N).

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hkg::Hypergraph;
use crate::numerics::{dropout_mask, Activation, CustomOp, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};

/// Sparse destination → source lists in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    num_src: usize,
}

impl Adjacency {
    pub fn new(lists: &[Vec<usize>], num_src: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for list in lists {
            for &s in list {
                if s >= num_src {
                    return Err(Error::Index(format!("source {s} of {num_src}")));
                }
                indices.push(s);
            }
            offsets.push(indices.len());
        }
        Ok(Adjacency {
            offsets,
            indices,
            num_src,
        })
    }

    pub fn num_dst(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_src(&self) -> usize {
        self.num_src
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, dst: usize) -> &[usize] {
        &self.indices[self.offsets[dst]..self.offsets[dst + 1]]
    }

    fn range(&self, dst: usize) -> std::ops::Range<usize> {
        self.offsets[dst]..self.offsets[dst + 1]
    }
}

/// Incidence in both directions, sized for an embedding table that may carry
/// extra rows (PAD, MASK) beyond the hypergraph's nodes.
#[derive(Debug, Clone)]
pub struct GlobalGraph {
    node_to_edge: Rc<Adjacency>,
    edge_to_node: Rc<Adjacency>,
    isolated: Vec<bool>,
}

impl GlobalGraph {
    pub fn new(hypergraph: &Hypergraph, table_rows: usize) -> Result<Self> {
        if table_rows < hypergraph.num_nodes() {
            return Err(Error::Shape(format!(
                "table has {table_rows} rows for {} nodes",
                hypergraph.num_nodes()
            )));
        }
        let members: Vec<Vec<usize>> = (0..hypergraph.num_hyperedges())
            .map(|e| hypergraph.members(e).to_vec())
            .collect();
        let incident: Vec<Vec<usize>> = (0..table_rows)
            .map(|v| {
                if v < hypergraph.num_nodes() {
                    hypergraph.incident_hyperedges(v).to_vec()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let isolated = incident.iter().map(|l| l.is_empty()).collect();
        Ok(GlobalGraph {
            node_to_edge: Rc::new(Adjacency::new(&members, table_rows)?),
            edge_to_node: Rc::new(Adjacency::new(&incident, hypergraph.num_hyperedges())?),
            isolated,
        })
    }

    pub fn num_hyperedges(&self) -> usize {
        self.node_to_edge.num_dst()
    }

    pub fn num_rows(&self) -> usize {
        self.edge_to_node.num_dst()
    }

    /// Hyperedge → member nodes.
    pub fn members(&self) -> &Adjacency {
        &self.node_to_edge
    }

    /// Node → incident hyperedges.
    pub fn incident(&self) -> &Adjacency {
        &self.edge_to_node
    }
}

/// Hyperparameters shared by every global layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalSettings {
    pub heads: usize,
    pub activation: Activation,
    pub dropout: f64,
}

/// Tape handles of one layer's parameters: projection `W` (d×d, heads are
/// column slices) and the two attention vectors (heads × 2·d/heads).
#[derive(Debug, Clone, Copy)]
pub struct GlobalLayerVars {
    pub w: Var,
    pub att_nh: Var,
    pub att_hn: Var,
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        DEFAULT_LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        DEFAULT_LEAKY_SLOPE
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shapes(dst_key: &Tensor, src_key: &Tensor, src_val: &Tensor, att: &Tensor, adj: &Adjacency, heads: usize) -> Result<usize> {
    let d = dst_key.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let ok = dst_key.rows() == adj.num_dst()
        && src_key.rows() == adj.num_src()
        && src_val.rows() == adj.num_src()
        && src_key.cols() == d
        && src_val.cols() == d
        && att.shape() == [heads, 2 * dh];
    if !ok {
        return Err(Error::Shape(format!(
            "hyper attention: dst {:?}, src key {:?}, src val {:?}, att {:?}, adjacency {}→{}",
            dst_key.shape(),
            src_key.shape(),
            src_val.shape(),
            att.shape(),
            adj.num_src(),
            adj.num_dst()
        )));
    }
    Ok(dh)
}

struct Forward {
    out: Tensor,
    /// Pre-activation scores, `[edge * heads + h]`.
    scores: Vec<f64>,
    /// Normalized weights before dropout, same layout.
    weights: Vec<f64>,
}

fn forward(dst_key: &Tensor, src_key: &Tensor, src_val: &Tensor, att: &Tensor, adj: &Adjacency, heads: usize, mask: Option<&[f64]>) -> Forward {
    let d = dst_key.cols();
    let dh = d / heads;
    let mut src_part = vec![0.0; adj.num_src() * heads];
    for j in 0..adj.num_src() {
        let row = src_key.row(j);
        for h in 0..heads {
            src_part[j * heads + h] = dot(&att.row(h)[dh..], &row[h * dh..(h + 1) * dh]);
        }
    }
    let mut out = Tensor::zeros(&[adj.num_dst(), d]);
    let mut scores = vec![0.0; adj.nnz() * heads];
    let mut weights = vec![0.0; adj.nnz() * heads];
    let mut buf = Vec::new();
    for i in 0..adj.num_dst() {
        let range = adj.range(i);
        if range.is_empty() {
            continue;
        }
        let key = dst_key.row(i);
        for h in 0..heads {
            let dst_part = dot(&att.row(h)[..dh], &key[h * dh..(h + 1) * dh]);
            buf.clear();
            for k in range.clone() {
                let e = dst_part + src_part[adj.indices[k] * heads + h];
                scores[k * heads + h] = e;
                buf.push(leaky(e));
            }
            let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = buf.iter_mut().map(|s| {
                *s = (*s - max).exp();
                *s
            }).sum();
            let orow = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (n, k) in range.clone().enumerate() {
                let p = buf[n] / total;
                weights[k * heads + h] = p;
                let w = p * mask.map_or(1.0, |m| m[k * heads + h]);
                let v = &src_val.row(adj.indices[k])[h * dh..(h + 1) * dh];
                for (o, x) in orow.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
        }
    }
    Forward { out, scores, weights }
}

struct HyperAttention {
    adj: Rc<Adjacency>,
    heads: usize,
    scores: Vec<f64>,
    weights: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl CustomOp for HyperAttention {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (dst_key, src_key, src_val, att) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let adj = &*self.adj;
        let heads = self.heads;
        let d = dst_key.cols();
        let dh = d / heads;
        let mut g_dst = Tensor::zeros(dst_key.shape());
        let mut g_key = Tensor::zeros(src_key.shape());
        let mut g_val = Tensor::zeros(src_val.shape());
        let mut g_att = Tensor::zeros(att.shape());
        let mut dp = Vec::new();
        for i in 0..adj.num_dst() {
            let range = adj.range(i);
            if range.is_empty() {
                continue;
            }
            let g = grad.row(i);
            for h in 0..heads {
                let gh = &g[h * dh..(h + 1) * dh];
                dp.clear();
                let mut inner = 0.0;
                for k in range.clone() {
                    let j = adj.indices[k];
                    let m = self.mask.as_ref().map_or(1.0, |m| m[k * heads + h]);
                    let p = self.weights[k * heads + h];
                    let v = &src_val.row(j)[h * dh..(h + 1) * dh];
                    let dw = dot(gh, v);
                    let gv = &mut g_val.row_mut(j)[h * dh..(h + 1) * dh];
                    for (a, b) in gv.iter_mut().zip(gh) {
                        *a += p * m * b;
                    }
                    dp.push(dw * m);
                    inner += p * dw * m;
                }
                let a_dst = &att.row(h)[..dh];
                let a_src = &att.row(h)[dh..];
                let mut de_dst = 0.0;
                for (n, k) in range.clone().enumerate() {
                    let j = adj.indices[k];
                    let p = self.weights[k * heads + h];
                    let de = p * (dp[n] - inner) * leaky_grad(self.scores[k * heads + h]);
                    de_dst += de;
                    let ks = &src_key.row(j)[h * dh..(h + 1) * dh];
                    {
                        let ga = &mut g_att.row_mut(h)[dh..];
                        for (a, b) in ga.iter_mut().zip(ks) {
                            *a += de * b;
                        }
                    }
                    let gk = &mut g_key.row_mut(j)[h * dh..(h + 1) * dh];
                    for (a, b) in gk.iter_mut().zip(a_src) {
                        *a += de * b;
                    }
                }
                let kd = &dst_key.row(i)[h * dh..(h + 1) * dh];
                {
                    let ga = &mut g_att.row_mut(h)[..dh];
                    for (a, b) in ga.iter_mut().zip(kd) {
                        *a += de_dst * b;
                    }
                }
                let gd = &mut g_dst.row_mut(i)[h * dh..(h + 1) * dh];
                for (a, b) in gd.iter_mut().zip(a_dst) {
                    *a += de_dst * b;
                }
            }
        }
        vec![Some(g_dst), Some(g_key), Some(g_val), Some(g_att)]
    }
}

/// Multi-head attention aggregation over a sparse adjacency.
///
/// For destination `i` and head `h`, the weights are
/// `softmax_j(LR(a_h[..dh]·dst_key[i,h] + a_h[dh..]·src_key[j,h]))` over `j` in
/// the adjacency list of `i`, and the output slice is `Σ_j w_ij · src_val[j,h]`.
/// Destinations without neighbors get a zero row. With a positive `dropout`
/// in training mode, attention weights are dropped and rescaled.
#[allow(clippy::too_many_arguments)]
pub fn hyper_attention<R: Rng>(
    tape: &mut Tape,
    dst_key: Var,
    src_key: Var,
    src_val: Var,
    att: Var,
    adj: &Rc<Adjacency>,
    heads: usize,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_shapes(
        tape.value(dst_key),
        tape.value(src_key),
        tape.value(src_val),
        tape.value(att),
        adj,
        heads,
    )?;
    let mask = if training && dropout > 0.0 {
        Some(dropout_mask(adj.nnz() * heads, dropout, rng)?)
    } else if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!("dropout rate {dropout} outside [0, 1)")));
    } else {
        None
    };
    let f = forward(
        tape.value(dst_key),
        tape.value(src_key),
        tape.value(src_val),
        tape.value(att),
        adj,
        heads,
        mask.as_deref(),
    );
    let op = HyperAttention {
        adj: Rc::clone(adj),
        heads,
        scores: f.scores,
        weights: f.weights,
        mask,
    };
    Ok(tape.custom(vec![dst_key, src_key, src_val, att], f.out, Box::new(op)))
}

/// Normalized attention weights (no dropout), laid out as `[edge * heads + h]`
/// in adjacency order.
pub fn attention_weights(dst_key: &Tensor, src_key: &Tensor, att: &Tensor, adj: &Adjacency, heads: usize) -> Result<Vec<f64>> {
    check_shapes(dst_key, src_key, src_key, att, adj, heads)?;
    Ok(forward(dst_key, src_key, src_key, att, adj, heads, None).weights)
}

/// N-to-H: updated hyperedge embeddings `σ(Σ_j α_ej W h_vj)` from node
/// embeddings `node` and hyperedge embeddings `edge`.
pub fn n_to_h_attention<R: Rng>(
    tape: &mut Tape,
    graph: &GlobalGraph,
    node: Var,
    edge: Var,
    layer: &GlobalLayerVars,
    settings: &GlobalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let node_proj = tape.matmul(node, layer.w)?;
    let edge_proj = tape.matmul(edge, layer.w)?;
    n_to_h_projected(tape, graph, node_proj, edge_proj, layer, settings, training, rng)
}

#[allow(clippy::too_many_arguments)]
fn n_to_h_projected<R: Rng>(
    tape: &mut Tape,
    graph: &GlobalGraph,
    node_proj: Var,
    edge_proj: Var,
    layer: &GlobalLayerVars,
    settings: &GlobalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let agg = hyper_attention(
        tape,
        edge_proj,
        node_proj,
        node_proj,
        layer.att_nh,
        &graph.node_to_edge,
        settings.heads,
        settings.dropout,
        training,
        rng,
    )?;
    Ok(tape.activation(agg, settings.activation))
}

/// H-to-N: updated node embeddings `σ(Σ_j β_vj h̃_ej)`, scored against `W h_e`
/// of the layer's input hyperedge embeddings. Nodes without incident
/// hyperedges keep their input row.
#[allow(clippy::too_many_arguments)]
pub fn h_to_n_attention<R: Rng>(
    tape: &mut Tape,
    graph: &GlobalGraph,
    node: Var,
    edge: Var,
    updated_edge: Var,
    layer: &GlobalLayerVars,
    settings: &GlobalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let node_proj = tape.matmul(node, layer.w)?;
    let edge_proj = tape.matmul(edge, layer.w)?;
    h_to_n_projected(tape, graph, node, node_proj, edge_proj, updated_edge, layer, settings, training, rng)
}

#[allow(clippy::too_many_arguments)]
fn h_to_n_projected<R: Rng>(
    tape: &mut Tape,
    graph: &GlobalGraph,
    node: Var,
    node_proj: Var,
    edge_proj: Var,
    updated_edge: Var,
    layer: &GlobalLayerVars,
    settings: &GlobalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let agg = hyper_attention(
        tape,
        node_proj,
        edge_proj,
        updated_edge,
        layer.att_hn,
        &graph.edge_to_node,
        settings.heads,
        settings.dropout,
        training,
        rng,
    )?;
    let act = tape.activation(agg, settings.activation);
    if graph.isolated.iter().any(|&b| b) {
        tape.row_select(node, act, graph.isolated.clone())
    } else {
        Ok(act)
    }
}

/// Stack of dual-attention layers. Each layer feeds its updated hyperedge
/// embeddings to the next. Zero layers return `node` unchanged.
#[allow(clippy::too_many_arguments)]
pub fn global_forward<R: Rng>(
    tape: &mut Tape,
    graph: &GlobalGraph,
    node: Var,
    edge: Var,
    layers: &[GlobalLayerVars],
    settings: &GlobalSettings,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let (mut node, mut edge) = (node, edge);
    for layer in layers {
        let node_proj = tape.matmul(node, layer.w)?;
        let edge_proj = tape.matmul(edge, layer.w)?;
        let updated = n_to_h_projected(tape, graph, node_proj, edge_proj, layer, settings, training, rng)?;
        node = h_to_n_projected(tape, graph, node, node_proj, edge_proj, updated, layer, settings, training, rng)?;
        edge = updated;
    }
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, masked_softmax, max_relative_error};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, edges: usize) -> Hypergraph {
        let lists = (0..edges)
            .map(|_| {
                let k = rng.random_range(1..=nodes.min(4));
                let mut all: Vec<usize> = (0..nodes).collect();
                all.shuffle(rng);
                all.truncate(k);
                all
            })
            .collect();
        Hypergraph::from_hyperedges(nodes, lists).unwrap()
    }

    /// Dense masked-softmax evaluation: non-neighbors score −∞.
    fn dense_attention(dst_key: &Tensor, src_key: &Tensor, src_val: &Tensor, att: &Tensor, adj: &Adjacency, heads: usize) -> Tensor {
        let d = dst_key.cols();
        let dh = d / heads;
        let mut out = Tensor::zeros(&[adj.num_dst(), d]);
        for i in 0..adj.num_dst() {
            if adj.neighbors(i).is_empty() {
                continue;
            }
            for h in 0..heads {
                let mut scores = vec![f64::NEG_INFINITY; adj.num_src()];
                let mut valid = vec![false; adj.num_src()];
                for &j in adj.neighbors(i) {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += att.at(h, c) * dst_key.at(i, h * dh + c) + att.at(h, dh + c) * src_key.at(j, h * dh + c);
                    }
                    scores[j] = if s > 0.0 { s } else { 0.2 * s };
                    valid[j] = true;
                }
                let p = masked_softmax(&Tensor::new(vec![scores.len()], scores).unwrap(), &valid).unwrap();
                for j in 0..adj.num_src() {
                    for c in 0..dh {
                        out.row_mut(i)[h * dh + c] += p.data()[j] * src_val.at(j, h * dh + c);
                    }
                }
            }
        }
        out
    }

    struct Toy {
        graph: GlobalGraph,
        node: Tensor,
        edge: Tensor,
        w: Tensor,
        att_nh: Tensor,
        att_hn: Tensor,
        settings: GlobalSettings,
    }

    fn toy(seed: u64, nodes: usize, extra_rows: usize, edges: usize, d: usize, heads: usize) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hg = random_graph(&mut rng, nodes, edges);
        Toy {
            graph: GlobalGraph::new(&hg, nodes + extra_rows).unwrap(),
            node: random(&mut rng, nodes + extra_rows, d),
            edge: random(&mut rng, edges, d),
            w: random(&mut rng, d, d),
            att_nh: random(&mut rng, heads, 2 * d / heads),
            att_hn: random(&mut rng, heads, 2 * d / heads),
            settings: GlobalSettings {
                heads,
                activation: Activation::Elu,
                dropout: 0.0,
            },
        }
    }

    fn bind(tape: &mut Tape, t: &Toy) -> (Var, Var, GlobalLayerVars) {
        let node = tape.variable(t.node.clone());
        let edge = tape.variable(t.edge.clone());
        let layer = GlobalLayerVars {
            w: tape.variable(t.w.clone()),
            att_nh: tape.variable(t.att_nh.clone()),
            att_hn: tape.variable(t.att_hn.clone()),
        };
        (node, edge, layer)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn single_member_hyperedge_weight_one() {
        let hg = Hypergraph::from_hyperedges(2, vec![vec![1]]).unwrap();
        let graph = GlobalGraph::new(&hg, 2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (node, edge, w) = (random(&mut r, 2, 4), random(&mut r, 1, 4), random(&mut r, 4, 4));
        let att = random(&mut r, 2, 4);
        let mut tape = Tape::new();
        let layer = GlobalLayerVars {
            w: tape.constant(w.clone()),
            att_nh: tape.constant(att.clone()),
            att_hn: tape.constant(att),
        };
        let (nv, ev) = (tape.constant(node.clone()), tape.constant(edge));
        let settings = GlobalSettings {
            heads: 2,
            activation: Activation::Tanh,
            dropout: 0.0,
        };
        let out = n_to_h_attention(&mut tape, &graph, nv, ev, &layer, &settings, false, &mut rng()).unwrap();
        let proj = crate::numerics::matmul(&node, &w).unwrap();
        for c in 0..4 {
            assert!((tape.value(out).at(0, c) - proj.at(1, c).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_members_split_evenly() {
        let hg = Hypergraph::from_hyperedges(2, vec![vec![0, 1]]).unwrap();
        let graph = GlobalGraph::new(&hg, 2).unwrap();
        let key = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let dst = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let att = Tensor::from_rows(&[vec![0.5, 0.1, -0.7, 0.9]]).unwrap();
        let w = attention_weights(&dst, &key, &att, graph.members(), 1).unwrap();
        assert_eq!(w.len(), 2);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn node_in_one_hyperedge_gets_its_activation() {
        let hg = Hypergraph::from_hyperedges(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let graph = GlobalGraph::new(&hg, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let layer = GlobalLayerVars {
            w: tape.constant(random(&mut r, 4, 4)),
            att_nh: tape.constant(random(&mut r, 2, 4)),
            att_hn: tape.constant(random(&mut r, 2, 4)),
        };
        let node = tape.constant(random(&mut r, 3, 4));
        let edge = tape.constant(random(&mut r, 2, 4));
        let updated = tape.constant(random(&mut r, 2, 4));
        let settings = GlobalSettings {
            heads: 2,
            activation: Activation::Relu,
            dropout: 0.0,
        };
        let out = h_to_n_attention(&mut tape, &graph, node, edge, updated, &layer, &settings, false, &mut rng()).unwrap();
        let h = tape.value(updated).clone();
        for c in 0..4 {
            assert!((tape.value(out).at(0, c) - h.at(0, c).max(0.0)).abs() < 1e-15);
            assert!((tape.value(out).at(2, c) - h.at(1, c).max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_dense_oracle_on_random_graphs() {
        for trial in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + trial);
            let heads = [1, 2, 4][trial as usize % 3];
            let d = heads * r.random_range(1..4);
            let (nodes, edges) = (r.random_range(2..8), r.random_range(1..6));
            let hg = random_graph(&mut r, nodes, edges);
            let graph = GlobalGraph::new(&hg, nodes).unwrap();
            for adj in [graph.members(), graph.incident()] {
                let dk = random(&mut r, adj.num_dst(), d);
                let sk = random(&mut r, adj.num_src(), d);
                let sv = random(&mut r, adj.num_src(), d);
                let att = random(&mut r, heads, 2 * d / heads);
                let got = forward(&dk, &sk, &sv, &att, adj, heads, None).out;
                let want = dense_attention(&dk, &sk, &sv, &att, adj, heads);
                assert!(got.max_abs_diff(&want) < 1e-10, "trial {trial}");
            }
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let t = toy(3, 5, 0, 3, 4, 2);
        let mut tape = Tape::new();
        let (node, edge, _) = bind(&mut tape, &t);
        let out = global_forward(&mut tape, &t.graph, node, edge, &[], &t.settings, true, &mut rng()).unwrap();
        assert_eq!(tape.value(out), &t.node);
    }

    #[test]
    fn one_layer_composes_both_directions() {
        let t = toy(4, 6, 2, 4, 6, 3);
        let mut tape = Tape::new();
        let (node, edge, layer) = bind(&mut tape, &t);
        let out = global_forward(&mut tape, &t.graph, node, edge, &[layer], &t.settings, false, &mut rng()).unwrap();
        let proj = |x: &Tensor| crate::numerics::matmul(x, &t.w).unwrap();
        let (np, ep) = (proj(&t.node), proj(&t.edge));
        let edge_new = crate::numerics::activation(
            Activation::Elu,
            &dense_attention(&ep, &np, &np, &t.att_nh, t.graph.members(), 3),
        );
        let node_new = crate::numerics::activation(
            Activation::Elu,
            &dense_attention(&np, &ep, &edge_new, &t.att_hn, t.graph.incident(), 3),
        );
        let got = tape.value(out);
        for v in 0..8 {
            let want = if t.graph.incident().neighbors(v).is_empty() {
                t.node.row(v)
            } else {
                node_new.row(v)
            };
            for (a, b) in got.row(v).iter().zip(want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // PAD/MASK rows are isolated
        assert_eq!(got.row(6), t.node.row(6));
        assert_eq!(got.row(7), t.node.row(7));
    }

    #[test]
    fn member_permutation_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let lists: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![2, 4, 5], vec![1, 5]];
        let base = Hypergraph::from_hyperedges(6, lists.clone()).unwrap();
        let shuffled_lists = lists
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.shuffle(&mut r);
                l
            })
            .collect();
        let shuffled = Hypergraph::from_hyperedges(6, shuffled_lists).unwrap();
        let mut t = toy(6, 6, 0, 3, 4, 2);
        let run = |graph: &GlobalGraph, t: &Toy| {
            let mut tape = Tape::new();
            let (node, edge, layer) = bind(&mut tape, t);
            let out = global_forward(&mut tape, graph, node, edge, &[layer, layer], &t.settings, false, &mut rng()).unwrap();
            tape.value(out).clone()
        };
        t.graph = GlobalGraph::new(&base, 6).unwrap();
        let a = run(&t.graph, &t);
        let b = run(&GlobalGraph::new(&shuffled, 6).unwrap(), &t);
        assert_eq!(a, b);
    }

    #[test]
    fn locality_of_one_layer() {
        // 0-1 share an edge, 2-3 share an edge; 0 cannot see 2 or 3
        let hg = Hypergraph::from_hyperedges(4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let mut t = toy(7, 4, 0, 2, 4, 2);
        t.graph = GlobalGraph::new(&hg, 4).unwrap();
        let run = |t: &Toy| {
            let mut tape = Tape::new();
            let (node, edge, layer) = bind(&mut tape, t);
            let out = global_forward(&mut tape, &t.graph, node, edge, &[layer], &t.settings, false, &mut rng()).unwrap();
            tape.value(out).clone()
        };
        let before = run(&t);
        t.node.row_mut(3).iter_mut().for_each(|x| *x += 0.7);
        let after = run(&t);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }

    #[test]
    fn weights_are_normalized() {
        for seed in 0..20 {
            let t = toy(seed, 7, 0, 5, 4, 2);
            let np = crate::numerics::matmul(&t.node, &t.w).unwrap();
            let ep = crate::numerics::matmul(&t.edge, &t.w).unwrap();
            for (adj, dk, sk, att) in [
                (t.graph.members(), &ep, &np, &t.att_nh),
                (t.graph.incident(), &np, &ep, &t.att_hn),
            ] {
                let w = attention_weights(dk, sk, att, adj, 2).unwrap();
                for i in 0..adj.num_dst() {
                    let range = adj.range(i);
                    if range.is_empty() {
                        continue;
                    }
                    for h in 0..2 {
                        let s: f64 = range.clone().map(|k| w[k * 2 + h]).sum();
                        assert!((s - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = toy(8, 6, 1, 4, 4, 2);
        let loss = |t: &Toy, tape: &mut Tape, node: Var, edge: Var, layer: GlobalLayerVars| {
            let out = global_forward(tape, &t.graph, node, edge, &[layer, layer], &t.settings, false, &mut rng()).unwrap();
            let weights = tape.constant(random(&mut ChaCha8Rng::seed_from_u64(99), 7, 4));
            let sq = tape.matmul_nt(out, weights).unwrap();
            let sq = tape.activation(sq, Activation::Tanh);
            tape.sum(sq)
        };
        let mut tape = Tape::new();
        let (node, edge, layer) = bind(&mut tape, &t);
        let l = loss(&t, &mut tape, node, edge, layer);
        let grads = tape.backward(l).unwrap();
        let eval = |set: &dyn Fn(&mut Toy, &Tensor), x: &Tensor| {
            let mut t2 = toy(8, 6, 1, 4, 4, 2);
            set(&mut t2, x);
            let mut tape = Tape::new();
            let (node, edge, layer) = bind(&mut tape, &t2);
            let l = loss(&t2, &mut tape, node, edge, layer);
            tape.value(l).data()[0]
        };
        let cases: [(Var, &Tensor, &dyn Fn(&mut Toy, &Tensor)); 5] = [
            (node, &t.node, &|t, x| t.node = x.clone()),
            (edge, &t.edge, &|t, x| t.edge = x.clone()),
            (layer.w, &t.w, &|t, x| t.w = x.clone()),
            (layer.att_nh, &t.att_nh, &|t, x| t.att_nh = x.clone()),
            (layer.att_hn, &t.att_hn, &|t, x| t.att_hn = x.clone()),
        ];
        for (var, x, set) in cases {
            let numeric = finite_difference_gradient(|x| eval(set, x), x, 1e-5);
            let err = max_relative_error(grads.get(var).unwrap(), &numeric);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn dropout_gradient_matches_fixed_mask() {
        // same rng seed → same mask, so the loss is a deterministic function
        let t = toy(9, 5, 0, 3, 4, 2);
        let settings = GlobalSettings { dropout: 0.3, ..t.settings };
        let f = |x: &Tensor| {
            let mut tape = Tape::new();
            let (_, edge, layer) = bind(&mut tape, &t);
            let node = tape.variable(x.clone());
            let out = global_forward(&mut tape, &t.graph, node, edge, &[layer], &settings, true, &mut rng()).unwrap();
            let s = tape.activation(out, Activation::Tanh);
            let s = tape.sum(s);
            (tape.value(s).data()[0], tape, node, s)
        };
        let (_, tape, node, s) = f(&t.node);
        let grads = tape.backward(s).unwrap();
        let numeric = finite_difference_gradient(|x| f(x).0, &t.node, 1e-5);
        assert!(max_relative_error(grads.get(node).unwrap(), &numeric) < 1e-4);
    }
}
