//! Hyper-relational knowledge graph data model.

mod data;
mod hypergraph;
mod sequence;

pub use data::{
    dataset_statistics, is_entity_position, load_splits, parse_dataset, parse_str,
    split_statistics, DataFormat, DatasetStats, HFact, LabeledFact, LabeledSplits, Vocabulary,
};
pub use hypergraph::{build_hypergraph, Hypergraph};
pub use sequence::{
    edge_type, edge_type_matrix, fact_to_sequence, sequence_len, EdgeType, FactSequence, RoleTag,
    NUM_EDGE_TYPES, NUM_ROLES,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Fraction of training facts held out for validation when a dataset ships without a valid split.
pub const HOLDOUT_FRACTION: f64 = 0.05;

/// Indexed splits sharing one vocabulary built over their union.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<HFact>,
    pub valid: Vec<HFact>,
    pub test: Vec<HFact>,
    /// True when `valid` was carved out of the training file.
    pub valid_from_holdout: bool,
}

impl Dataset {
    /// Index labeled splits. Without a validation file, a seed-controlled
    /// [`HOLDOUT_FRACTION`] of the training facts becomes the validation set.
    pub fn from_splits(splits: &LabeledSplits, holdout_seed: u64) -> Result<Self> {
        let vocab = Vocabulary::build(splits.all());
        let index = |facts: &[LabeledFact]| -> Result<Vec<HFact>> {
            facts.iter().map(|f| vocab.index_fact(f)).collect()
        };
        let mut train = index(&splits.train)?;
        let test = index(&splits.test)?;
        let (valid, valid_from_holdout) = match &splits.valid {
            Some(v) => (index(v)?, false),
            None => {
                let n_hold = holdout_size(train.len());
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(holdout_seed));
                let mut held: Vec<usize> = order[..n_hold].to_vec();
                held.sort_unstable();
                let mut valid = Vec::with_capacity(n_hold);
                for &i in held.iter().rev() {
                    valid.push(train.remove(i));
                }
                valid.reverse();
                (valid, true)
            }
        };
        Ok(Dataset {
            vocab,
            train,
            valid,
            test,
            valid_from_holdout,
        })
    }

    /// Build directly from indexed facts (synthetic data, tests).
    pub fn from_facts(vocab: Vocabulary, train: Vec<HFact>, valid: Vec<HFact>, test: Vec<HFact>) -> Self {
        Dataset {
            vocab,
            train,
            valid,
            test,
            valid_from_holdout: false,
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &HFact> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Largest qualifier count over all splits.
    pub fn max_qualifiers(&self) -> usize {
        self.all_facts().map(|f| f.qualifiers.len()).max().unwrap_or(0)
    }

    pub fn split(&self, name: &str) -> Option<&[HFact]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn holdout_size(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, n - 1)
}
