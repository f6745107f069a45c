//! Parameter layout and the full forward pass: global attention, local
//! encoder and tied decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::decoder::{decoder_mlp, log_softmax_rows, softmax_cross_entropy, soft_labels, tied_logits, DecoderVars};
use crate::error::{Error, Result};
use crate::global::{global_forward, GlobalGraph, GlobalLayerVars, GlobalSettings};
use crate::hkg::{RoleTag, NUM_EDGE_TYPES};
use crate::local::{encoder_forward, role_groups, LocalLayerVars, LocalSettings, SequenceBatch};
use crate::numerics::{normal, xavier_uniform, xavier_uniform_fans, Activation, ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of embedding-table initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Structural hyperparameters that determine the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_hyperedges: usize,
    pub global_layers: usize,
    pub global_heads: usize,
    pub global_activation: Activation,
    pub global_dropout: f64,
    pub local_layers: usize,
    pub local_heads: usize,
    pub local_dropout: f64,
    pub decoder_activation: Activation,
    pub hidden_size: usize,
    pub node_bias: bool,
    pub edge_bias: bool,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig, num_entities: usize, num_relations: usize, num_hyperedges: usize) -> Self {
        Architecture {
            dim: cfg.embedding_dim,
            num_entities,
            num_relations,
            num_hyperedges,
            global_layers: cfg.effective_global_layers(),
            global_heads: cfg.global_heads,
            global_activation: cfg.global_activation,
            global_dropout: cfg.global_dropout,
            local_layers: cfg.local_layers,
            local_heads: cfg.local_heads,
            local_dropout: cfg.local_dropout,
            decoder_activation: cfg.decoder_activation,
            hidden_size: cfg.hidden_size,
            node_bias: !cfg.no_node_bias,
            edge_bias: !cfg.no_edge_bias,
        }
    }

    /// Entity table rows: real entities, then PAD, then MASK.
    pub fn entity_rows(&self) -> usize {
        self.num_entities + 2
    }

    pub fn relation_rows(&self) -> usize {
        self.num_relations + 2
    }

    pub fn global_settings(&self) -> GlobalSettings {
        GlobalSettings {
            heads: self.global_heads,
            activation: self.global_activation,
            dropout: self.global_dropout,
        }
    }

    pub fn local_settings(&self) -> LocalSettings {
        LocalSettings {
            heads: self.local_heads,
            dropout: self.local_dropout,
            activation: self.decoder_activation,
            node_bias: self.node_bias,
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        let d = self.dim;
        let mut n = (self.entity_rows() + self.relation_rows()) * d;
        if self.global_layers > 0 {
            n += self.num_hyperedges * d;
            n += self.global_layers * (d * d + 2 * 2 * d);
        }
        let groups = role_groups(self.node_bias);
        let per_local = 3 * groups * d * d
            + if self.edge_bias { 3 * NUM_EDGE_TYPES * d } else { 0 }
            + d * self.hidden_size
            + self.hidden_size
            + self.hidden_size * d
            + d
            + 4 * d;
        n += self.local_layers * per_local;
        n += 2 * d * d + 4 * d + self.num_entities + self.num_relations;
        n
    }
}

#[derive(Debug, Clone)]
struct GlobalIds {
    w: ParamId,
    att_nh: ParamId,
    att_hn: ParamId,
}

#[derive(Debug, Clone)]
struct LocalIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bias: Option<[ParamId; 3]>,
    ffn: [ParamId; 4],
    ln: [ParamId; 4],
}

#[derive(Debug, Clone)]
struct Ids {
    entity: ParamId,
    relation: ParamId,
    hyperedge: Option<ParamId>,
    global: Vec<GlobalIds>,
    local: Vec<LocalIds>,
    decoder: [ParamId; 6],
    entity_bias: ParamId,
    relation_bias: ParamId,
}

/// Parameters plus the handles needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
    ids: Ids,
}

/// Every parameter of a [`Model`] bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub entity: Var,
    pub relation: Var,
    pub hyperedge: Option<Var>,
    pub global: Vec<GlobalLayerVars>,
    pub local: Vec<LocalLayerVars>,
    pub decoder: DecoderVars,
    pub entity_bias: Var,
    pub relation_bias: Var,
}

/// Masked positions of a batch grouped by vocabulary kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskedSlots {
    /// `(batch row, index into that row's masked list)` for entity positions.
    pub entity: Vec<(usize, usize)>,
    pub relation: Vec<(usize, usize)>,
}

impl MaskedSlots {
    pub fn of(batch: &SequenceBatch) -> Self {
        let mut slots = MaskedSlots::default();
        for (row, positions) in batch.masked.iter().enumerate() {
            for (k, &p) in positions.iter().enumerate() {
                if RoleTag::of_position(p).is_entity() {
                    slots.entity.push((row, k));
                } else {
                    slots.relation.push((row, k));
                }
            }
        }
        slots
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::full(&[n], 1.0)
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// `groups` independent Xavier blocks of `d × d` stacked vertically.
fn stacked_xavier(groups: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(groups * d * d);
    for _ in 0..groups {
        data.extend(xavier_uniform(d, d, rng).into_data());
    }
    Tensor::new(vec![groups * d, d], data).expect("stacked shape")
}

impl Model {
    /// Fresh parameters: Xavier-uniform matrices, zero biases, unit norm
    /// gains, N(0, 0.02²) embeddings with zero PAD rows.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        let d = arch.dim;
        if d == 0 || d % arch.global_heads.max(1) != 0 || arch.local_heads == 0 || d % arch.local_heads != 0 {
            return Err(Error::Config(format!(
                "dimension {d} incompatible with {} global / {} local heads",
                arch.global_heads, arch.local_heads
            )));
        }
        let mut store = ParamStore::new();
        let mut entity_table = normal(&[arch.entity_rows(), d], EMBEDDING_INIT_STD, rng);
        entity_table.row_mut(arch.num_entities).fill(0.0);
        let mut relation_table = normal(&[arch.relation_rows(), d], EMBEDDING_INIT_STD, rng);
        relation_table.row_mut(arch.num_relations).fill(0.0);
        let entity = store.insert("entity_embedding", entity_table, true)?;
        let relation = store.insert("relation_embedding", relation_table, true)?;
        let mut hyperedge = None;
        let mut global = Vec::new();
        if arch.global_layers > 0 {
            if arch.num_hyperedges == 0 {
                return Err(Error::InvalidArgument("global layers need at least one hyperedge".into()));
            }
            hyperedge = Some(store.insert("hyperedge_embedding", xavier_uniform(arch.num_hyperedges, d, rng), true)?);
            let dh = d / arch.global_heads;
            for l in 0..arch.global_layers {
                let att_shape = [arch.global_heads, 2 * dh];
                global.push(GlobalIds {
                    w: store.insert(format!("global.{l}.w"), xavier_uniform(d, d, rng), true)?,
                    att_nh: store.insert(format!("global.{l}.att_nh"), xavier_uniform_fans(&att_shape, 2 * dh, 1, rng), true)?,
                    att_hn: store.insert(format!("global.{l}.att_hn"), xavier_uniform_fans(&att_shape, 2 * dh, 1, rng), true)?,
                });
            }
        }
        let groups = role_groups(arch.node_bias);
        let mut local = Vec::new();
        for l in 0..arch.local_layers {
            let p = |s: &str| format!("local.{l}.{s}");
            let wq = store.insert(p("wq"), stacked_xavier(groups, d, rng), true)?;
            let wk = store.insert(p("wk"), stacked_xavier(groups, d, rng), true)?;
            let wv = store.insert(p("wv"), stacked_xavier(groups, d, rng), true)?;
            let bias = if arch.edge_bias {
                Some([
                    store.insert(p("bq"), Tensor::zeros(&[NUM_EDGE_TYPES, d]), true)?,
                    store.insert(p("bk"), Tensor::zeros(&[NUM_EDGE_TYPES, d]), true)?,
                    store.insert(p("bv"), Tensor::zeros(&[NUM_EDGE_TYPES, d]), true)?,
                ])
            } else {
                None
            };
            let ffn = [
                store.insert(p("ffn.w1"), xavier_uniform(d, arch.hidden_size, rng), true)?,
                store.insert(p("ffn.b1"), zeros(arch.hidden_size), true)?,
                store.insert(p("ffn.w2"), xavier_uniform(arch.hidden_size, d, rng), true)?,
                store.insert(p("ffn.b2"), zeros(d), true)?,
            ];
            let ln = [
                store.insert(p("ln1.gain"), ones(d), true)?,
                store.insert(p("ln1.bias"), zeros(d), true)?,
                store.insert(p("ln2.gain"), ones(d), true)?,
                store.insert(p("ln2.bias"), zeros(d), true)?,
            ];
            local.push(LocalIds {
                wq,
                wk,
                wv,
                bias,
                ffn,
                ln,
            });
        }
        let decoder = [
            store.insert("decoder.w1", xavier_uniform(d, d, rng), true)?,
            store.insert("decoder.b1", zeros(d), true)?,
            store.insert("decoder.ln.gain", ones(d), true)?,
            store.insert("decoder.ln.bias", zeros(d), true)?,
            store.insert("decoder.w2", xavier_uniform(d, d, rng), true)?,
            store.insert("decoder.b2", zeros(d), true)?,
        ];
        let entity_bias = store.insert("decoder.entity_bias", zeros(arch.num_entities), true)?;
        let relation_bias = store.insert("decoder.relation_bias", zeros(arch.num_relations), true)?;
        Ok(Model {
            arch,
            params: store,
            ids: Ids {
                entity,
                relation,
                hyperedge,
                global,
                local,
                decoder,
                entity_bias,
                relation_bias,
            },
        })
    }

    /// Rebuild a model around a loaded parameter store, checking every
    /// expected name and shape.
    pub fn from_store(arch: Architecture, store: ParamStore) -> Result<Self> {
        let template = Model::init(arch.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64_const())?;
        if template.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in template.params.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Model {
            arch,
            params: store,
            ids: template.ids,
        })
    }

    pub fn entity_table(&self) -> &Tensor {
        self.params.value(self.ids.entity)
    }

    pub fn relation_table(&self) -> &Tensor {
        self.params.value(self.ids.relation)
    }

    /// Restore PAD rows to zero.
    pub fn zero_pad_rows(&mut self) {
        let (ne, nr) = (self.arch.num_entities, self.arch.num_relations);
        self.params.get_mut(self.ids.entity).value.row_mut(ne).fill(0.0);
        self.params.get_mut(self.ids.relation).value.row_mut(nr).fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let s = &self.params;
        let global = self
            .ids
            .global
            .iter()
            .map(|g| GlobalLayerVars {
                w: tape.param(s, g.w),
                att_nh: tape.param(s, g.att_nh),
                att_hn: tape.param(s, g.att_hn),
            })
            .collect();
        let local = self
            .ids
            .local
            .iter()
            .map(|l| LocalLayerVars {
                wq: tape.param(s, l.wq),
                wk: tape.param(s, l.wk),
                wv: tape.param(s, l.wv),
                bias: l.bias.map(|b| b.map(|id| tape.param(s, id))),
                ffn_w1: tape.param(s, l.ffn[0]),
                ffn_b1: tape.param(s, l.ffn[1]),
                ffn_w2: tape.param(s, l.ffn[2]),
                ffn_b2: tape.param(s, l.ffn[3]),
                ln1_gain: tape.param(s, l.ln[0]),
                ln1_bias: tape.param(s, l.ln[1]),
                ln2_gain: tape.param(s, l.ln[2]),
                ln2_bias: tape.param(s, l.ln[3]),
            })
            .collect();
        let dec = self.ids.decoder;
        Bound {
            entity: tape.param(s, self.ids.entity),
            relation: tape.param(s, self.ids.relation),
            hyperedge: self.ids.hyperedge.map(|id| tape.param(s, id)),
            global,
            local,
            decoder: DecoderVars {
                w1: tape.param(s, dec[0]),
                b1: tape.param(s, dec[1]),
                ln_gain: tape.param(s, dec[2]),
                ln_bias: tape.param(s, dec[3]),
                w2: tape.param(s, dec[4]),
                b2: tape.param(s, dec[5]),
            },
            entity_bias: tape.param(s, self.ids.entity_bias),
            relation_bias: tape.param(s, self.ids.relation_bias),
        }
    }

    /// Entity embeddings after the global layers (the raw table without them).
    pub fn global_entities<R: Rng>(&self, tape: &mut Tape, bound: &Bound, graph: Option<&GlobalGraph>, training: bool, rng: &mut R) -> Result<Var> {
        match (bound.hyperedge, graph) {
            (Some(edge), Some(graph)) => {
                if graph.num_hyperedges() != self.arch.num_hyperedges || graph.num_rows() != self.arch.entity_rows() {
                    return Err(Error::Shape(format!(
                        "graph has {} hyperedges over {} rows; model expects {} over {}",
                        graph.num_hyperedges(),
                        graph.num_rows(),
                        self.arch.num_hyperedges,
                        self.arch.entity_rows()
                    )));
                }
                global_forward(tape, graph, bound.entity, edge, &bound.global, &self.arch.global_settings(), training, rng)
            }
            (Some(_), None) => Err(Error::InvalidArgument("model has global layers but no hypergraph was given".into())),
            (None, _) => Ok(bound.entity),
        }
    }

    /// Contextual token embeddings (`rows·len × d`) from an entity table
    /// (usually globally updated) and the relation table.
    pub fn encode<R: Rng>(&self, tape: &mut Tape, bound: &Bound, entities: Var, batch: &SequenceBatch, training: bool, rng: &mut R) -> Result<Var> {
        let (ent_rows, rel_rows) = batch.lookups();
        // PAD ids resolve to `None`, so padding contributes a zero vector
        let pad_e = self.arch.num_entities;
        let pad_r = self.arch.num_relations;
        let ent_rows = ent_rows.into_iter().map(|r| r.filter(|&e| e != pad_e)).collect();
        let rel_rows = rel_rows.into_iter().map(|r| r.filter(|&e| e != pad_r)).collect();
        let xe = tape.gather(entities, ent_rows)?;
        let xr = tape.gather(bound.relation, rel_rows)?;
        let x = tape.add(xe, xr)?;
        encoder_forward(tape, batch, x, &bound.local, &self.arch.local_settings(), training, rng)
    }

    /// Logits for every masked position, split into entity and relation groups
    /// in [`MaskedSlots`] order.
    pub fn masked_logits(&self, tape: &mut Tape, bound: &Bound, hidden: Var, batch: &SequenceBatch, slots: &MaskedSlots) -> Result<(Option<Var>, Option<Var>)> {
        let arch = &self.arch;
        let mut run = |pairs: &[(usize, usize)], table: Var, n: usize, bias: Var| -> Result<Option<Var>> {
            if pairs.is_empty() {
                return Ok(None);
            }
            let rows = pairs
                .iter()
                .map(|&(r, k)| Some(batch.flat(r, batch.masked[r][k])))
                .collect();
            let x = tape.gather(hidden, rows)?;
            let h = decoder_mlp(tape, x, &bound.decoder, arch.decoder_activation)?;
            let candidates = tape.slice_rows(table, 0, n)?;
            Ok(Some(tied_logits(tape, h, candidates, bias)?))
        };
        let ent = run(&slots.entity, bound.entity, arch.num_entities, bound.entity_bias)?;
        let rel = run(&slots.relation, bound.relation, arch.num_relations, bound.relation_bias)?;
        Ok((ent, rel))
    }

    /// Mean soft-label cross-entropy over every masked position of the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        graph: Option<&GlobalGraph>,
        batch: &SequenceBatch,
        smoothing: (f64, f64),
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let entities = self.global_entities(tape, bound, graph, training, rng)?;
        let hidden = self.encode(tape, bound, entities, batch, training, rng)?;
        let slots = MaskedSlots::of(batch);
        let (ent, rel) = self.masked_logits(tape, bound, hidden, batch, &slots)?;
        let labels = |pairs: &[(usize, usize)], n: usize, eps: f64| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = pairs
                .iter()
                .map(|&(r, k)| soft_labels(batch.targets[r][k], n, eps))
                .collect::<Result<_>>()?;
            Tensor::from_rows(&rows)
        };
        let mut terms = Vec::new();
        if let Some(z) = ent {
            let y = labels(&slots.entity, self.arch.num_entities, smoothing.0)?;
            terms.push(softmax_cross_entropy(tape, z, y)?);
        }
        if let Some(z) = rel {
            let y = labels(&slots.relation, self.arch.num_relations, smoothing.1)?;
            terms.push(softmax_cross_entropy(tape, z, y)?);
        }
        let total = slots.entity.len() + slots.relation.len();
        if total == 0 {
            return Err(Error::InvalidArgument("batch has no masked positions".into()));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(tape.scale(loss, 1.0 / total as f64))
    }

    /// Inference-time entity table after the global layers.
    pub fn inference_entities(&self, graph: Option<&GlobalGraph>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64_const();
        let v = self.global_entities(&mut tape, &bound, graph, false, &mut rng)?;
        Ok(tape.value(v).clone())
    }

    /// Log-probabilities for every masked position of `batch`, indexed
    /// `[row][masked index]`, over the entity or relation vocabulary.
    pub fn masked_log_probs(&self, entities: &Tensor, batch: &SequenceBatch) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let ent_var = tape.constant(entities.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64_const();
        let hidden = self.encode(&mut tape, &bound, ent_var, batch, false, &mut rng)?;
        let slots = MaskedSlots::of(batch);
        // decode against the raw parameter tables
        let (ent, rel) = self.masked_logits(&mut tape, &bound, hidden, batch, &slots)?;
        let mut out: Vec<Vec<Vec<f64>>> = batch.masked.iter().map(|m| vec![Vec::new(); m.len()]).collect();
        for (logits, pairs) in [(ent, &slots.entity), (rel, &slots.relation)] {
            if let Some(z) = logits {
                let lp = log_softmax_rows(tape.value(z));
                for (i, &(r, k)) in pairs.iter().enumerate() {
                    out[r][k] = lp.row(i).to_vec();
                }
            }
        }
        Ok(out)
    }
}

/// Fixed-seed RNG for code paths that never draw (inference, templates).
trait ConstSeed {
    fn seed_from_u64_const() -> Self;
}

impl ConstSeed for rand_chacha::ChaCha8Rng {
    fn seed_from_u64_const() -> Self {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(0)
    }
}
