//! Masked-sample generation, the optimization loop and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_link_prediction, FilterIndex, ModelScorer, RankReport};
use crate::global::GlobalGraph;
use crate::hkg::{build_hypergraph, load_splits, Dataset, HFact, Hypergraph, RoleTag, Vocabulary};
use crate::local::SequenceBatch;
use crate::model::{Architecture, Model};
use crate::numerics::{checkpoint, Adam, Tape};

/// Metadata tag identifying model checkpoints.
pub const CHECKPOINT_KIND: &str = "hahe-model";

/// One training query: a fact with a single position masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedSample {
    /// Index of the source fact in its split.
    pub fact: usize,
    pub position: usize,
    pub role: RoleTag,
    pub target: usize,
}

/// One sample per position: `3 + 2·(arity − 2)`.
pub fn generate_masked_samples(fact_id: usize, fact: &HFact) -> Vec<MaskedSample> {
    (0..fact.num_positions())
        .map(|p| MaskedSample {
            fact: fact_id,
            position: p,
            role: RoleTag::of_position(p),
            target: fact.element(p),
        })
        .collect()
}

pub fn split_samples(facts: &[HFact]) -> Vec<MaskedSample> {
    facts.iter().enumerate().flat_map(|(i, f)| generate_masked_samples(i, f)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub samples: usize,
    pub batches: usize,
    pub seconds: f64,
}

impl EpochStats {
    /// Samples per second.
    pub fn throughput(&self) -> f64 {
        if self.seconds > 0.0 {
            self.samples as f64 / self.seconds
        } else {
            0.0
        }
    }
}

/// Global structure shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub hypergraph: Hypergraph,
    /// `None` when the model has no global layers.
    pub global: Option<GlobalGraph>,
}

impl GraphContext {
    /// Hypergraph over the training facts, or every split with `full_graph`.
    pub fn build(dataset: &Dataset, full_graph: bool, with_global: bool) -> Result<Self> {
        let facts: Vec<HFact> = if full_graph {
            dataset.all_facts().cloned().collect()
        } else {
            dataset.train.clone()
        };
        let n = dataset.vocab.num_entities();
        let hypergraph = build_hypergraph(&facts, n)?;
        let global = if with_global {
            Some(GlobalGraph::new(&hypergraph, n + 2)?)
        } else {
            None
        };
        Ok(GraphContext { hypergraph, global })
    }
}

/// A model, its optimizer and the data structures it trains against.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub graph: GraphContext,
    pub vocab: Vocabulary,
    pub max_qualifiers: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let config = config.finalize()?;
        if dataset.train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let data_max = dataset.max_qualifiers();
        let max_qualifiers = match config.max_qualifiers {
            Some(m) if m < data_max => return Err(Error::Capacity { qualifiers: data_max, max: m }),
            Some(m) => m,
            None => data_max,
        };
        let with_global = config.effective_global_layers() > 0;
        let graph = GraphContext::build(dataset, config.global_full_graph, with_global)?;
        let arch = Architecture::from_config(
            &config,
            dataset.vocab.num_entities(),
            dataset.vocab.num_relations(),
            graph.hypergraph.num_hyperedges(),
        );
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(arch, &mut init_rng)?;
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            config,
            model,
            graph,
            vocab: dataset.vocab.clone(),
            max_qualifiers,
        })
    }

    /// Forward, backward and one optimizer update; returns the batch loss.
    pub fn step(&mut self, batch: &SequenceBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let smoothing = (self.config.soft_label_entity, self.config.soft_label_relation);
        let loss = self
            .model
            .batch_loss(&mut tape, &bound, self.graph.global.as_ref(), batch, smoothing, true, &mut self.rng)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at optimizer step {} on a batch of {} rows",
                self.optimizer.steps_taken() + 1,
                batch.rows
            )));
        }
        let grads = tape.backward(loss)?;
        self.model.params.zero_grads();
        grads.accumulate_into(&tape, &mut self.model.params);
        if let Some((_, p)) = self.model.params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at optimizer step {}",
                p.name,
                self.optimizer.steps_taken() + 1
            )));
        }
        self.optimizer.step(&mut self.model.params);
        self.model.zero_pad_rows();
        Ok(value)
    }

    /// One pass over shuffled samples in batches of `batch_size`.
    pub fn train_epoch(&mut self, facts: &[HFact], samples: &[MaskedSample]) -> Result<EpochStats> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let positions: Vec<[usize; 1]> = chunk.iter().map(|&i| [samples[i].position]).collect();
            let queries: Vec<(&HFact, &[usize])> = chunk
                .iter()
                .zip(&positions)
                .map(|(&i, p)| (&facts[samples[i].fact], &p[..]))
                .collect();
            let batch = SequenceBatch::new(&queries, &self.vocab)?;
            total += self.step(&batch)? * chunk.len() as f64;
            batches += 1;
        }
        Ok(EpochStats {
            mean_loss: if samples.is_empty() { 0.0 } else { total / samples.len() as f64 },
            samples: samples.len(),
            batches,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn scorer(&self) -> Result<ModelScorer<'_>> {
        ModelScorer::new(&self.model, &self.vocab, self.graph.global.as_ref(), self.config.batch_size)
    }

    /// Link-prediction report for `facts`, filtered against `filter` when given.
    pub fn evaluate(&self, facts: &[HFact], filter: Option<&FilterIndex>) -> Result<RankReport> {
        let scorer = self.scorer()?;
        evaluate_link_prediction(&scorer, facts, filter, &self.graph.hypergraph, self.config.batch_size)
    }

    /// Checkpoint metadata: config, architecture, vocabulary and provenance.
    pub fn metadata(&self, data_dir: &str, epoch: usize, extra: serde_json::Value) -> serde_json::Value {
        json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "architecture": self.model.arch,
            "entities": self.vocab.entity_labels(),
            "relations": self.vocab.relation_labels(),
            "max_qualifiers": self.max_qualifiers,
            "data_dir": data_dir,
            "epoch": epoch,
            "extra": extra,
        })
    }

    pub fn save(&self, path: &Path, data_dir: &str, epoch: usize, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.model.params, &self.metadata(data_dir, epoch, extra))
    }
}

/// A model restored from a checkpoint file.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Model,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub max_qualifiers: usize,
    pub data_dir: String,
    pub metadata: serde_json::Value,
}

#[derive(Deserialize)]
struct MetadataFields {
    kind: String,
    config: TrainConfig,
    architecture: Architecture,
    entities: Vec<String>,
    relations: Vec<String>,
    max_qualifiers: usize,
    data_dir: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (store, metadata) = checkpoint::load(path)?;
    let fields: MetadataFields = serde_json::from_value(metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if fields.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("{}: not a model checkpoint ({})", path.display(), fields.kind)));
    }
    let vocab = Vocabulary::from_labels(fields.entities, fields.relations)?;
    let model = Model::from_store(fields.architecture, store)?;
    Ok(LoadedModel {
        model,
        vocab,
        config: fields.config,
        max_qualifiers: fields.max_qualifiers,
        data_dir: fields.data_dir,
        metadata,
    })
}

impl LoadedModel {
    /// Reload the training data and check it against the stored vocabulary.
    pub fn dataset(&self, data_dir: Option<&Path>) -> Result<Dataset> {
        let dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&self.data_dir));
        let ds = Dataset::from_splits(&load_splits(&dir, None)?, self.config.seed)?;
        if ds.vocab != self.vocab {
            return Err(Error::Checkpoint(format!(
                "vocabulary of {} differs from the checkpoint ({} / {} vs {} / {} entities / relations)",
                dir.display(),
                ds.vocab.num_entities(),
                ds.vocab.num_relations(),
                self.vocab.num_entities(),
                self.vocab.num_relations()
            )));
        }
        Ok(ds)
    }

    pub fn graph(&self, dataset: &Dataset) -> Result<GraphContext> {
        GraphContext::build(dataset, self.config.global_full_graph, self.model.arch.global_layers > 0)
    }
}

/// Paths written by [`run_training`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub best_valid_mrr: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Load `data_dir`, train and write checkpoints under `out_dir`.
pub fn run_training(config: TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let splits = load_splits(data_dir, None)?;
    let dataset = Dataset::from_splits(&splits, config.seed)?;
    run_training_on(config, &dataset, &data_dir.display().to_string(), out_dir, |_, _| {})
}

/// Train on an in-memory dataset. `progress` sees every epoch's stats.
pub fn run_training_on(
    config: TrainConfig,
    dataset: &Dataset,
    data_label: &str,
    out_dir: &Path,
    mut progress: impl FnMut(usize, &EpochStats),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(config, dataset)?;
    let config_path = out_dir.join("config.txt");
    fs::write(&config_path, trainer.config.to_string()).map_err(|e| Error::io(&config_path, e))?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");

    let samples = split_samples(&dataset.train);
    let filter = FilterIndex::build(dataset.all_facts());
    let epochs = trainer.config.epochs;
    let every = trainer.config.eval_every;
    let mut best_mrr: Option<f64> = None;
    let mut best_loss = f64::INFINITY;
    let mut last_loss = None;

    if epochs == 0 || dataset.valid.is_empty() {
        trainer.save(&best_path, data_label, 0, json!({}))?;
    }
    for epoch in 1..=epochs {
        let stats = trainer.train_epoch(&dataset.train, &samples)?;
        progress(epoch, &stats);
        best_loss = best_loss.min(stats.mean_loss);
        last_loss = Some(stats.mean_loss);
        let mut record = json!({
            "epoch": epoch,
            "loss": stats.mean_loss,
            "best_loss": best_loss,
        });
        let validate = !dataset.valid.is_empty() && ((every > 0 && epoch % every == 0) || epoch == epochs);
        if validate {
            let report = trainer.evaluate(&dataset.valid, Some(&filter))?;
            let mrr = report.all_entities.mrr;
            record["valid_all_entity_mrr"] = json!(mrr);
            if best_mrr.is_none_or(|b| mrr > b) {
                best_mrr = Some(mrr);
                trainer.save(&best_path, data_label, epoch, json!({ "valid_all_entity_mrr": mrr }))?;
            }
            record["best_valid_mrr"] = json!(best_mrr);
        }
        writeln!(log, "{record}").map_err(|e| Error::io(&log_path, e))?;
    }
    if dataset.valid.is_empty() && epochs > 0 {
        trainer.save(&best_path, data_label, epochs, json!({}))?;
    }
    trainer.save(&final_path, data_label, epochs, json!({ "final_loss": last_loss }))?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics_log: log_path,
        best_valid_mrr: best_mrr,
        final_loss: last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthetic_dataset, SyntheticSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            embedding_dim: 16,
            global_layers: 1,
            global_heads: 2,
            local_layers: 1,
            local_heads: 2,
            hidden_size: 32,
            batch_size: 64,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            soft_label_entity: 0.1,
            epochs: 3,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        synthetic_dataset(&SyntheticSpec {
            facts: 40,
            entities: 30,
            relations: 5,
            eval_facts: 8,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn sample_counts() {
        assert_eq!(generate_masked_samples(0, &HFact::triple(0, 0, 1)).len(), 3);
        let f = HFact::triple(0, 0, 1).with_qualifier(1, 2).with_qualifier(2, 3);
        let s = generate_masked_samples(4, &f);
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|x| x.fact == 4 && x.target == f.element(x.position)));
        let ds = small_data();
        let mut hist = [0usize; 8];
        for f in &ds.train {
            hist[f.arity()] += 1;
        }
        let want: usize = hist.iter().enumerate().map(|(a, &n)| n * (3 + 2 * a.saturating_sub(2))).sum();
        assert_eq!(split_samples(&ds.train).len(), want);
    }

    #[test]
    fn targets_never_special() {
        let ds = small_data();
        for s in split_samples(&ds.train) {
            let n = if s.role.is_entity() { ds.vocab.num_entities() } else { ds.vocab.num_relations() };
            assert!(s.target < n);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = small_data();
        let mut cfg = small_config();
        cfg.learning_rate = 0.0;
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let before = t.model.params.checksum();
        t.train_epoch(&ds.train, &split_samples(&ds.train)).unwrap();
        assert_eq!(t.model.params.checksum(), before);
    }

    #[test]
    fn same_seed_same_losses() {
        let ds = small_data();
        let run = || {
            let mut t = Trainer::new(small_config(), &ds).unwrap();
            let s = split_samples(&ds.train);
            (0..3).map(|_| t.train_epoch(&ds.train, &s).unwrap().mean_loss).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn pad_rows_stay_zero() {
        let ds = small_data();
        let mut t = Trainer::new(small_config(), &ds).unwrap();
        t.train_epoch(&ds.train, &split_samples(&ds.train)).unwrap();
        assert!(t.model.entity_table().row(ds.vocab.entity_pad()).iter().all(|&v| v == 0.0));
        assert!(t.model.relation_table().row(ds.vocab.relation_pad()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn evaluation_is_read_only() {
        let ds = small_data();
        let t = Trainer::new(small_config(), &ds).unwrap();
        let before = t.model.params.checksum();
        t.evaluate(&ds.test, None).unwrap();
        assert_eq!(t.model.params.checksum(), before);
    }

    #[test]
    fn untrained_model_near_random_ranking() {
        let ds = synthetic_dataset(&SyntheticSpec {
            facts: 200,
            entities: 100,
            relations: 10,
            eval_facts: 200,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let t = Trainer::new(small_config(), &ds).unwrap();
        let r = t.evaluate(&ds.test, None).unwrap();
        // uniform rank over N candidates: mean 1/r is H_N / N, variance from E[1/r²]
        let n = ds.vocab.num_entities() as f64;
        let h1: f64 = (1..=100).map(|k| 1.0 / k as f64).sum();
        let h2: f64 = (1..=100).map(|k| 1.0 / (k * k) as f64).sum();
        let mean = h1 / n;
        let sd = ((h2 / n - mean * mean) / r.all_entities.count as f64).sqrt();
        assert!((r.all_entities.mrr - mean).abs() < 3.0 * sd, "{} vs {mean} ± {sd}", r.all_entities.mrr);
    }

    #[test]
    fn run_writes_checkpoints_and_log() {
        let ds = small_data();
        let dir = tempfile::tempdir().unwrap();
        let out = run_training_on(small_config(), &ds, "synthetic", dir.path(), |_, _| {}).unwrap();
        assert!(out.final_checkpoint.is_file() && out.best_checkpoint.is_file());
        let log = fs::read_to_string(&out.metrics_log).unwrap();
        assert_eq!(log.lines().count(), 3);
        let mut best = f64::INFINITY;
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let b = v["best_loss"].as_f64().unwrap();
            assert!(b <= best);
            best = b;
        }
        let loaded = load_model(&out.best_checkpoint).unwrap();
        assert_eq!(loaded.vocab, ds.vocab);
        assert_eq!(loaded.config.epochs, 3);
        let cfg = TrainConfig::load(&dir.path().join("config.txt")).unwrap();
        assert_eq!(cfg, loaded.config);
    }

    #[test]
    fn zero_epochs_writes_initialization() {
        let ds = small_data();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.epochs = 0;
        let out = run_training_on(cfg.clone(), &ds, "synthetic", dir.path(), |_, _| {}).unwrap();
        let init = Trainer::new(cfg, &ds).unwrap();
        let (store, _) = checkpoint::load(&out.final_checkpoint).unwrap();
        let want = checkpoint::decode(&checkpoint::encode(&init.model.params, &json!({})).unwrap()).unwrap().0;
        assert_eq!(store.checksum(), want.checksum());
    }

    #[test]
    fn no_global_checkpoint_lacks_global_parameters() {
        let ds = small_data();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.no_global = true;
        cfg.epochs = 1;
        let out = run_training_on(cfg, &ds, "synthetic", dir.path(), |_, _| {}).unwrap();
        let (store, _) = checkpoint::load(&out.final_checkpoint).unwrap();
        assert!(store.iter().all(|(_, p)| !p.name.starts_with("global.") && p.name != "hyperedge_embedding"));
    }
}
