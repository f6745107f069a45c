//! Training configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub global_layers: usize,
    pub global_dropout: f64,
    pub global_activation: Activation,
    pub global_heads: usize,
    pub local_layers: usize,
    pub local_dropout: f64,
    pub local_heads: usize,
    pub decoder_activation: Activation,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Probability mass moved off the target for entity positions.
    pub soft_label_entity: f64,
    /// Probability mass moved off the target for relation positions.
    pub soft_label_relation: f64,
    pub epochs: usize,
    pub seed: u64,
    pub no_global: bool,
    pub no_node_bias: bool,
    pub no_edge_bias: bool,
    /// Sequence capacity; `None` takes the dataset maximum.
    pub max_qualifiers: Option<usize>,
    /// Validate every this many epochs; 0 validates only after the last epoch.
    pub eval_every: usize,
    /// Build the global hypergraph from all splits instead of train only.
    pub global_full_graph: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 256,
            global_layers: 2,
            global_dropout: 0.2,
            global_activation: Activation::Elu,
            global_heads: 4,
            local_layers: 12,
            local_dropout: 0.2,
            local_heads: 4,
            decoder_activation: Activation::Gelu,
            hidden_size: 256,
            batch_size: 1024,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            soft_label_entity: 0.9,
            soft_label_relation: 0.0,
            epochs: 300,
            seed: 42,
            no_global: false,
            no_node_bias: false,
            no_edge_bias: false,
            max_qualifiers: None,
            eval_every: 10,
            global_full_graph: false,
        }
    }
}

/// Field names accepted in config files, in canonical order.
pub const CONFIG_KEYS: [&str; 23] = [
    "embedding_dim",
    "global_layers",
    "global_dropout",
    "global_activation",
    "global_heads",
    "local_layers",
    "local_dropout",
    "local_heads",
    "decoder_activation",
    "hidden_size",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "soft_label_entity",
    "soft_label_relation",
    "epochs",
    "seed",
    "no_global",
    "no_node_bias",
    "no_edge_bias",
    "max_qualifiers",
    "eval_every",
    "global_full_graph",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "embedding_dim" => self.embedding_dim = parse(key, v)?,
            "global_layers" => self.global_layers = parse(key, v)?,
            "global_dropout" => self.global_dropout = parse(key, v)?,
            "global_activation" => self.global_activation = parse(key, v)?,
            "global_heads" => self.global_heads = parse(key, v)?,
            "local_layers" => self.local_layers = parse(key, v)?,
            "local_dropout" => self.local_dropout = parse(key, v)?,
            "local_heads" => self.local_heads = parse(key, v)?,
            "decoder_activation" => self.decoder_activation = parse(key, v)?,
            "hidden_size" => self.hidden_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "soft_label_entity" => self.soft_label_entity = parse(key, v)?,
            "soft_label_relation" => self.soft_label_relation = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "no_global" => self.no_global = parse(key, v)?,
            "no_node_bias" => self.no_node_bias = parse(key, v)?,
            "no_edge_bias" => self.no_edge_bias = parse(key, v)?,
            "max_qualifiers" => {
                self.max_qualifiers = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "eval_every" => self.eval_every = parse(key, v)?,
            "global_full_graph" => self.global_full_graph = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Textual value of one field, as accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "embedding_dim" => self.embedding_dim.to_string(),
            "global_layers" => self.global_layers.to_string(),
            "global_dropout" => self.global_dropout.to_string(),
            "global_activation" => self.global_activation.to_string(),
            "global_heads" => self.global_heads.to_string(),
            "local_layers" => self.local_layers.to_string(),
            "local_dropout" => self.local_dropout.to_string(),
            "local_heads" => self.local_heads.to_string(),
            "decoder_activation" => self.decoder_activation.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "soft_label_entity" => self.soft_label_entity.to_string(),
            "soft_label_relation" => self.soft_label_relation.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "no_global" => self.no_global.to_string(),
            "no_node_bias" => self.no_node_bias.to_string(),
            "no_edge_bias" => self.no_edge_bias.to_string(),
            "max_qualifiers" => self.max_qualifiers.map_or("auto".into(), |m| m.to_string()),
            "eval_every" => self.eval_every.to_string(),
            "global_full_graph" => self.global_full_graph.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Apply ablation implications and check ranges.
    pub fn finalize(mut self) -> Result<Self> {
        if self.no_global {
            self.global_layers = 0;
        }
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        for (name, heads) in [("global_heads", self.global_heads), ("local_heads", self.local_heads)] {
            if heads == 0 || self.embedding_dim % heads != 0 {
                return bad(format!("{name} = {heads} must divide embedding_dim = {}", self.embedding_dim));
            }
        }
        for (name, rate) in [("global_dropout", self.global_dropout), ("local_dropout", self.local_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} = {rate} outside [0, 1)"));
            }
        }
        for (name, eps) in [
            ("soft_label_entity", self.soft_label_entity),
            ("soft_label_relation", self.soft_label_relation),
        ] {
            if !(0.0..1.0).contains(&eps) {
                return bad(format!("{name} = {eps} outside [0, 1)"));
            }
        }
        if self.hidden_size == 0 || self.batch_size == 0 {
            return bad("hidden_size and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative".into());
        }
        Ok(self)
    }

    /// Number of global layers actually built.
    pub fn effective_global_layers(&self) -> usize {
        if self.no_global {
            0
        } else {
            self.global_layers
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The config-file form, one `key = value` per line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in CONFIG_KEYS {
            writeln!(f, "{key} = {}", self.get(key).expect("known key"))?;
        }
        Ok(())
    }
}
