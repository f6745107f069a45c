//! Filtered ranking, MRR / Hits@K, report breakdowns and multi-position
//! prediction.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalGraph;
use crate::hkg::{is_entity_position, HFact, Hypergraph, Vocabulary};
use crate::local::SequenceBatch;
use crate::model::Model;
use crate::numerics::Tensor;

/// Default number of candidates kept per masked position.
pub const DEFAULT_BEAM: usize = 100;
/// Default number of joint tuples kept.
pub const DEFAULT_KEEP: usize = 100;

/// Anything that turns masked queries into per-position log-probabilities.
pub trait Scorer {
    /// For each `(fact, masked positions)` query, one log-probability vector
    /// per masked position, over entities or relations by position kind.
    fn score(&self, queries: &[(&HFact, &[usize])]) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// A trained model with its precomputed global entity table.
pub struct ModelScorer<'a> {
    model: &'a Model,
    vocab: &'a Vocabulary,
    entities: Tensor,
    batch_size: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocabulary, graph: Option<&GlobalGraph>, batch_size: usize) -> Result<Self> {
        Ok(ModelScorer {
            model,
            vocab,
            entities: model.inference_entities(graph)?,
            batch_size: batch_size.max(1),
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, queries: &[(&HFact, &[usize])]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(self.batch_size) {
            let batch = SequenceBatch::new(chunk, self.vocab)?;
            out.extend(self.model.masked_log_probs(&self.entities, &batch)?);
        }
        Ok(out)
    }
}

/// Token marking a masked slot in a textual fact.
pub const MASK_TOKEN: &str = "?";

/// Parse `s r o [a v]*` (tab- or whitespace-separated) where `?` marks masked
/// slots. Masked slots hold element 0 in the returned fact.
pub fn parse_masked_fact(text: &str, vocab: &Vocabulary) -> Result<(HFact, Vec<usize>)> {
    let tokens: Vec<&str> = if text.contains('\t') {
        text.split('\t').map(str::trim).collect()
    } else {
        text.split_whitespace().collect()
    };
    if tokens.len() < 3 || tokens.len() % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected `s r o [a v]*`, found {} tokens",
            tokens.len()
        )));
    }
    let mut fact = HFact::triple(0, 0, 0);
    for _ in 0..(tokens.len() - 3) / 2 {
        fact = fact.with_qualifier(0, 0);
    }
    let mut masked = Vec::new();
    for (p, &t) in tokens.iter().enumerate() {
        if t == MASK_TOKEN {
            masked.push(p);
            continue;
        }
        let id = if is_entity_position(p) { vocab.entity_id(t) } else { vocab.relation_id(t) };
        fact.set_element(p, id.ok_or_else(|| Error::UnknownLabel(t.to_string()))?);
    }
    Ok((fact, masked))
}

/// `1 + |{c ∉ other_true ∪ {target} : score_c ≥ score_target}|`.
pub fn filtered_rank(scores: &[f64], target: usize, other_true: &HashSet<usize>) -> Result<usize> {
    let t = *scores
        .get(target)
        .ok_or_else(|| Error::Index(format!("target {target} >= {} candidates", scores.len())))?;
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| c != target && s >= t && !other_true.contains(&c))
        .count();
    Ok(1 + above)
}

/// MRR and Hits@K over a set of ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

pub fn mrr_hits(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        count: ranks.len(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
    })
}

const HOLE: usize = usize::MAX;

fn holed(fact: &HFact, positions: &[usize]) -> Vec<usize> {
    (0..fact.num_positions())
        .map(|p| if positions.contains(&p) { HOLE } else { fact.element(p) })
        .collect()
}

/// Known fillers for every single-position hole of a fact collection.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    fillers: HashMap<(Vec<usize>, usize), HashSet<usize>>,
}

impl FilterIndex {
    pub fn build<'a>(facts: impl IntoIterator<Item = &'a HFact>) -> Self {
        let mut fillers: HashMap<(Vec<usize>, usize), HashSet<usize>> = HashMap::new();
        for fact in facts {
            for p in 0..fact.num_positions() {
                fillers.entry((holed(fact, &[p]), p)).or_default().insert(fact.element(p));
            }
        }
        FilterIndex { fillers }
    }

    /// All known fillers of `position` given the rest of `fact`.
    pub fn fillers(&self, fact: &HFact, position: usize) -> Option<&HashSet<usize>> {
        self.fillers.get(&(holed(fact, &[position]), position))
    }

    /// Known fillers other than the fact's own element.
    pub fn other_true(&self, fact: &HFact, position: usize) -> HashSet<usize> {
        let own = fact.element(position);
        self.fillers(fact, position)
            .map(|s| s.iter().copied().filter(|&c| c != own).collect())
            .unwrap_or_default()
    }
}

/// MRR over entity queries whose target falls in a degree range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucket {
    /// Inclusive bounds on the target's hyperedge count.
    pub min_degree: usize,
    pub max_degree: usize,
    pub count: usize,
    pub mrr: f64,
}

/// Hits@1 per fact arity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArityRow {
    pub arity: usize,
    pub subject_object_count: usize,
    pub subject_object_hits1: f64,
    pub qualifier_count: usize,
    pub qualifier_hits1: Option<f64>,
}

/// Single-position link-prediction results and breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub filtered: bool,
    pub subject_object: Metrics,
    pub all_entities: Metrics,
    pub main_relation: Metrics,
    pub all_relations: Metrics,
    /// Qualifier value positions; absent when no evaluated fact has qualifiers.
    pub qualifier_values: Option<Metrics>,
    pub degree_buckets: Vec<DegreeBucket>,
    pub arity: Vec<ArityRow>,
}

/// Bucket `[2^k, 2^(k+1) - 1]`, with degree 0 alone in bucket 0.
fn degree_bucket(degree: usize) -> (usize, usize) {
    if degree == 0 {
        (0, 0)
    } else {
        let k = usize::BITS - 1 - degree.leading_zeros();
        (1 << k, (1 << (k + 1)) - 1)
    }
}

/// One masked query per position of every fact.
pub fn evaluate_link_prediction(
    scorer: &dyn Scorer,
    facts: &[HFact],
    filter: Option<&FilterIndex>,
    hypergraph: &Hypergraph,
    batch_size: usize,
) -> Result<RankReport> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument("no facts to evaluate".into()));
    }
    let positions: Vec<Vec<[usize; 1]>> = facts.iter().map(|f| (0..f.num_positions()).map(|p| [p]).collect()).collect();
    let queries: Vec<(&HFact, &[usize])> = facts
        .iter()
        .zip(&positions)
        .flat_map(|(f, ps)| ps.iter().map(move |p| (f, &p[..])))
        .collect();
    let mut so = Vec::new();
    let mut ent = Vec::new();
    let mut main_rel = Vec::new();
    let mut rel = Vec::new();
    let mut qual_val = Vec::new();
    let mut degrees: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut arity: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for chunk in queries.chunks(batch_size.max(1)) {
        let scores = scorer.score(chunk)?;
        for ((fact, pos), lp) in chunk.iter().zip(scores) {
            let p = pos[0];
            let target = fact.element(p);
            let others = filter.map(|f| f.other_true(fact, p)).unwrap_or_default();
            let rank = filtered_rank(&lp[0], target, &others)?;
            if is_entity_position(p) {
                ent.push(rank);
                let bucket = degree_bucket(hypergraph.node_degree(target).unwrap_or(0));
                degrees.entry(bucket).or_default().push(rank);
                let row = arity.entry(fact.arity()).or_default();
                if p < 3 {
                    so.push(rank);
                    row.0.push(rank);
                } else {
                    qual_val.push(rank);
                    row.1.push(rank);
                }
            } else {
                rel.push(rank);
                if p == 1 {
                    main_rel.push(rank);
                }
            }
        }
    }
    let hits1 = |r: &[usize]| r.iter().filter(|&&x| x == 1).count() as f64 / r.len() as f64;
    Ok(RankReport {
        filtered: filter.is_some(),
        subject_object: mrr_hits(&so)?,
        all_entities: mrr_hits(&ent)?,
        main_relation: mrr_hits(&main_rel)?,
        all_relations: mrr_hits(&rel)?,
        qualifier_values: if qual_val.is_empty() { None } else { Some(mrr_hits(&qual_val)?) },
        degree_buckets: degrees
            .into_iter()
            .map(|((lo, hi), r)| DegreeBucket {
                min_degree: lo,
                max_degree: hi,
                count: r.len(),
                mrr: r.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / r.len() as f64,
            })
            .collect(),
        arity: arity
            .into_iter()
            .map(|(a, (s, q))| ArityRow {
                arity: a,
                subject_object_count: s.len(),
                subject_object_hits1: hits1(&s),
                qualifier_count: q.len(),
                qualifier_hits1: (!q.is_empty()).then(|| hits1(&q)),
            })
            .collect(),
    })
}

impl RankReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("report parse: {e}")))
    }

    /// Degree and arity breakdowns as `table,key,count,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,key,count,metric,value\n");
        for b in &self.degree_buckets {
            out.push_str(&format!("degree,{}-{},{},mrr,{}\n", b.min_degree, b.max_degree, b.count, b.mrr));
        }
        for a in &self.arity {
            out.push_str(&format!("arity,{},{},subject_object_hits1,{}\n", a.arity, a.subject_object_count, a.subject_object_hits1));
            if let Some(h) = a.qualifier_hits1 {
                out.push_str(&format!("arity,{},{},qualifier_hits1,{}\n", a.arity, a.qualifier_count, h));
            }
        }
        out
    }
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ranking", if self.filtered { "filtered" } else { "raw" })?;
        writeln!(f, "{:<16} {:>7} {:>8} {:>8} {:>8} {:>8}", "group", "count", "MRR", "Hits@1", "Hits@3", "Hits@10")?;
        let mut rows = vec![
            ("subject/object", self.subject_object),
            ("all entities", self.all_entities),
            ("main relation", self.main_relation),
            ("all relations", self.all_relations),
        ];
        if let Some(q) = self.qualifier_values {
            rows.push(("qualifier values", q));
        }
        for (name, m) in rows {
            writeln!(f, "{name:<16} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", m.count, m.mrr, m.hits1, m.hits3, m.hits10)?;
        }
        writeln!(f, "\n{:<12} {:>7} {:>8}", "degree", "count", "MRR")?;
        for b in &self.degree_buckets {
            writeln!(f, "{:<12} {:>7} {:>8.4}", format!("{}-{}", b.min_degree, b.max_degree), b.count, b.mrr)?;
        }
        writeln!(f, "\n{:<6} {:>8} {:>10} {:>8} {:>10}", "arity", "s/o n", "s/o H@1", "qual n", "qual H@1")?;
        for a in &self.arity {
            let q = a.qualifier_hits1.map_or("-".to_string(), |h| format!("{h:.4}"));
            writeln!(f, "{:<6} {:>8} {:>10.4} {:>8} {:>10}", a.arity, a.subject_object_count, a.subject_object_hits1, a.qualifier_count, q)?;
        }
        Ok(())
    }
}

/// A candidate tuple with its joint probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTuple {
    pub elements: Vec<usize>,
    pub log_prob: f64,
}

impl ScoredTuple {
    pub fn probability(&self) -> f64 {
        self.log_prob.exp()
    }
}

/// Candidates of one position sorted by descending score, ties by id.
fn top_candidates(log_probs: &[f64], beam: usize) -> Vec<(usize, f64)> {
    let mut c: Vec<(usize, f64)> = log_probs.iter().copied().enumerate().collect();
    c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    c.truncate(beam);
    c
}

struct Frontier {
    log_prob: f64,
    ranks: Vec<usize>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.log_prob.total_cmp(&other.log_prob).then_with(|| other.ranks.cmp(&self.ranks))
    }
}

fn joint(lists: &[Vec<(usize, f64)>], ranks: &[usize]) -> f64 {
    lists.iter().zip(ranks).map(|(l, &r)| l[r].1).sum()
}

/// Best `keep` tuples of the product of each position's top-`beam`
/// candidates, by joint log-probability.
pub fn multi_position_predict(marginals: &[Vec<f64>], beam: usize, keep: usize) -> Result<Vec<ScoredTuple>> {
    if marginals.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least two masked positions, got {}", marginals.len())));
    }
    if beam == 0 || keep == 0 {
        return Err(Error::InvalidArgument("beam and keep must be at least 1".into()));
    }
    if marginals.iter().any(|m| m.is_empty()) {
        return Err(Error::InvalidArgument("empty candidate list".into()));
    }
    let lists: Vec<Vec<(usize, f64)>> = marginals.iter().map(|m| top_candidates(m, beam)).collect();
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0; lists.len()];
    heap.push(Frontier {
        log_prob: joint(&lists, &start),
        ranks: start.clone(),
    });
    seen.insert(start);
    let mut out = Vec::with_capacity(keep);
    while let Some(Frontier { log_prob, ranks }) = heap.pop() {
        out.push(ScoredTuple {
            elements: lists.iter().zip(&ranks).map(|(l, &r)| l[r].0).collect(),
            log_prob,
        });
        if out.len() == keep {
            break;
        }
        for i in 0..ranks.len() {
            if ranks[i] + 1 < lists[i].len() {
                let mut next = ranks.clone();
                next[i] += 1;
                if seen.insert(next.clone()) {
                    heap.push(Frontier {
                        log_prob: joint(&lists, &next),
                        ranks: next,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Score one fact with several masked positions and return its best tuples.
pub fn predict_tuples(scorer: &dyn Scorer, fact: &HFact, positions: &[usize], beam: usize, keep: usize) -> Result<Vec<ScoredTuple>> {
    let scores = scorer.score(&[(fact, positions)])?;
    multi_position_predict(&scores[0], beam, keep)
}

/// Where the masked positions sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionCategory {
    /// Every masked position is inside a qualifier.
    #[serde(rename = "av")]
    Av,
    /// At least one masked position is in the main triple.
    #[serde(rename = "sro/av")]
    SroAv,
    #[serde(rename = "all")]
    All,
}

/// What kinds of element are masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TypeCategory {
    #[serde(rename = "Ent-Ent")]
    EntEnt,
    #[serde(rename = "Ent-Rel")]
    EntRel,
    #[serde(rename = "Rel-Rel")]
    RelRel,
}

impl fmt::Display for PositionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionCategory::Av => "av",
            PositionCategory::SroAv => "sro/av",
            PositionCategory::All => "all",
        })
    }
}

impl fmt::Display for TypeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TypeCategory::EntEnt => "Ent-Ent",
            TypeCategory::EntRel => "Ent-Rel",
            TypeCategory::RelRel => "Rel-Rel",
        })
    }
}

/// The specific position category (`Av` or `SroAv`) and type category of a
/// masked position set. Every set also belongs to [`PositionCategory::All`].
pub fn categorize(positions: &[usize]) -> (PositionCategory, TypeCategory) {
    let pos = if positions.iter().all(|&p| p >= 3) {
        PositionCategory::Av
    } else {
        PositionCategory::SroAv
    };
    let entities = positions.iter().filter(|&&p| is_entity_position(p)).count();
    let kind = if entities == positions.len() {
        TypeCategory::EntEnt
    } else if entities == 0 {
        TypeCategory::RelRel
    } else {
        TypeCategory::EntRel
    };
    (pos, kind)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn position_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// MRR for one (type, position) category cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCell {
    pub kind: TypeCategory,
    pub positions: PositionCategory,
    pub count: usize,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPositionReport {
    pub k: usize,
    pub beam: usize,
    pub keep: usize,
    pub filtered: bool,
    /// Only non-empty cells.
    pub cells: Vec<MultiCell>,
}

impl MultiPositionReport {
    pub fn cell(&self, kind: TypeCategory, positions: PositionCategory) -> Option<&MultiCell> {
        self.cells.iter().find(|c| c.kind == kind && c.positions == positions)
    }
}

impl fmt::Display for MultiPositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}-position prediction (beam {}, keep {}, {})", self.k, self.beam, self.keep, if self.filtered { "filtered" } else { "raw" })?;
        writeln!(f, "{:<8} {:<7} {:>7} {:>8}", "type", "where", "count", "MRR")?;
        for c in &self.cells {
            writeln!(f, "{:<8} {:<7} {:>7} {:>8.4}", c.kind.to_string(), c.positions.to_string(), c.count, c.mrr)?;
        }
        Ok(())
    }
}

/// Known filler tuples for a masked position set, keyed by the holed fact.
fn tuple_index<'a>(known: impl IntoIterator<Item = &'a HFact>, positions: &[usize]) -> HashMap<Vec<usize>, HashSet<Vec<usize>>> {
    let mut index: HashMap<Vec<usize>, HashSet<Vec<usize>>> = HashMap::new();
    for fact in known {
        if positions.iter().all(|&p| p < fact.num_positions()) {
            let tuple = positions.iter().map(|&p| fact.element(p)).collect();
            index.entry(holed(fact, positions)).or_default().insert(tuple);
        }
    }
    index
}

/// Reciprocal rank of `truth` among `kept` tuples, pessimistic on ties;
/// zero when it was not kept.
pub fn tuple_reciprocal_rank(kept: &[ScoredTuple], truth: &[usize], other_true: &HashSet<Vec<usize>>) -> f64 {
    let Some(t) = kept.iter().find(|c| c.elements == truth) else {
        return 0.0;
    };
    let above = kept
        .iter()
        .filter(|c| c.elements != truth && c.log_prob >= t.log_prob && !other_true.contains(&c.elements))
        .count();
    1.0 / (1 + above) as f64
}

/// Rank every fact's true tuple for all `k`-position masks, grouped by
/// category. `known` enables filtering of other true tuples.
pub fn evaluate_multi_position(
    scorer: &dyn Scorer,
    facts: &[HFact],
    k: usize,
    beam: usize,
    keep: usize,
    known: Option<&[HFact]>,
) -> Result<MultiPositionReport> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k} must be at least 2")));
    }
    let mut sums: BTreeMap<(TypeCategory, PositionCategory), (usize, f64)> = BTreeMap::new();
    let mut indexes: HashMap<Vec<usize>, HashMap<Vec<usize>, HashSet<Vec<usize>>>> = HashMap::new();
    for fact in facts {
        for positions in position_subsets(fact.num_positions(), k) {
            let kept = predict_tuples(scorer, fact, &positions, beam, keep)?;
            let truth: Vec<usize> = positions.iter().map(|&p| fact.element(p)).collect();
            let others = match known {
                Some(known) => {
                    let index = indexes.entry(positions.clone()).or_insert_with(|| tuple_index(known, &positions));
                    let mut s = index.get(&holed(fact, &positions)).cloned().unwrap_or_default();
                    s.remove(&truth);
                    s
                }
                None => HashSet::new(),
            };
            let rr = tuple_reciprocal_rank(&kept, &truth, &others);
            let (pos, kind) = categorize(&positions);
            for cat in [pos, PositionCategory::All] {
                let e = sums.entry((kind, cat)).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += rr;
            }
        }
    }
    Ok(MultiPositionReport {
        k,
        beam,
        keep,
        filtered: known.is_some(),
        cells: sums
            .into_iter()
            .map(|((kind, positions), (count, sum))| MultiCell {
                kind,
                positions,
                count,
                mrr: sum / count as f64,
            })
            .collect(),
    })
}
