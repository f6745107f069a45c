//! Deterministic synthetic hyper-relational graphs for tests and benchmarks.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hkg::{Dataset, HFact, Vocabulary};

/// Shape of a generated graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub facts: usize,
    pub entities: usize,
    pub relations: usize,
    pub max_qualifiers: usize,
    /// Fraction of facts carrying at least one qualifier.
    pub qualified_fraction: f64,
    /// Number of training facts copied into valid and test.
    pub eval_facts: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            facts: 200,
            entities: 300,
            relations: 12,
            max_qualifiers: 2,
            qualified_fraction: 0.5,
            eval_facts: 20,
            seed: 7,
        }
    }
}

/// Distinct random facts. Valid and test repeat the first `eval_facts`
/// training facts, which makes them a memorization probe.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.entities < 2 || spec.relations < 1 {
        return Err(Error::InvalidArgument("synthetic graph needs >= 2 entities and >= 1 relation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut train = Vec::with_capacity(spec.facts);
    let mut attempts = 0;
    while train.len() < spec.facts {
        attempts += 1;
        if attempts > 100 * spec.facts.max(1) {
            return Err(Error::InvalidArgument("synthetic spec too small for the requested fact count".into()));
        }
        let s = rng.random_range(0..spec.entities);
        let mut o = rng.random_range(0..spec.entities - 1);
        if o >= s {
            o += 1;
        }
        let mut fact = HFact::triple(s, rng.random_range(0..spec.relations), o);
        if spec.max_qualifiers > 0 && rng.random_bool(spec.qualified_fraction) {
            for _ in 0..rng.random_range(1..=spec.max_qualifiers) {
                fact = fact.with_qualifier(rng.random_range(0..spec.relations), rng.random_range(0..spec.entities));
            }
        }
        if seen.insert(fact.clone()) {
            train.push(fact);
        }
    }
    let vocab = Vocabulary::from_labels(
        (0..spec.entities).map(|i| format!("e{i}")).collect(),
        (0..spec.relations).map(|i| format!("r{i}")).collect(),
    )?;
    let held = train[..spec.eval_facts.min(train.len())].to_vec();
    Ok(Dataset::from_facts(vocab, train, held.clone(), held))
}

/// Write `train.txt`, `valid.txt` and `test.txt` as tab-separated labels.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, facts) in [("train", &dataset.train), ("valid", &dataset.valid), ("test", &dataset.test)] {
        let mut text = String::new();
        for f in facts {
            text.push_str(&dataset.vocab.label_fact(f).tokens().join("\t"));
            text.push('\n');
        }
        let path = dir.join(format!("{name}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
