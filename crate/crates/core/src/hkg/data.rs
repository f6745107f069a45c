//! Dataset ingestion: token-stream parsing, vocabularies, and indexed facts.
//!
//! A fact on disk is the token stream `s r o [a v]*`. The canonical format is
//! one fact per line with tab-separated tokens; JSON lines (one array of
//! strings per line, same token order) are accepted as well.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk encoding of a fact file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tsv,
    Jsonl,
}

impl DataFormat {
    /// Guess the format from a file extension (`.jsonl`/`.json` vs. everything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Tsv,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" | "txt" => Ok(DataFormat::Tsv),
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!("unknown data format {other:?}"))),
        }
    }
}

/// A fact whose elements are still string labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledFact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub qualifiers: Vec<(String, String)>,
}

impl LabeledFact {
    pub fn arity(&self) -> usize {
        2 + self.qualifiers.len()
    }

    /// Tokens in sequence order `s r o a1 v1 ...`.
    pub fn tokens(&self) -> Vec<&str> {
        let mut out = vec![
            self.subject.as_str(),
            self.relation.as_str(),
            self.object.as_str(),
        ];
        for (a, v) in &self.qualifiers {
            out.push(a);
            out.push(v);
        }
        out
    }

    /// Build a fact from an `s r o [a v]*` token list.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> std::result::Result<Self, String> {
        if tokens.len() < 3 {
            return Err(format!("expected at least 3 tokens, found {}", tokens.len()));
        }
        if tokens.len() % 2 == 0 {
            return Err(format!(
                "expected an odd token count (s r o [a v]*), found {}",
                tokens.len()
            ));
        }
        if let Some(i) = tokens.iter().position(|t| t.as_ref().is_empty()) {
            return Err(format!("token {} is empty", i + 1));
        }
        let t = |i: usize| tokens[i].as_ref().to_string();
        Ok(LabeledFact {
            subject: t(0),
            relation: t(1),
            object: t(2),
            qualifiers: (3..tokens.len())
                .step_by(2)
                .map(|i| (t(i), t(i + 1)))
                .collect(),
        })
    }
}

/// Parse one fact file. Whitespace-only lines are skipped.
pub fn parse_dataset(path: &Path, format: DataFormat) -> Result<Vec<LabeledFact>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, format, path)
}

/// Parse facts from an in-memory string; `origin` is only used in error messages.
pub fn parse_str(text: &str, format: DataFormat, origin: &Path) -> Result<Vec<LabeledFact>> {
    let mut facts = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedFact {
            path: origin.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let tokens: Vec<String> = match format {
            DataFormat::Tsv => line.split('\t').map(|t| t.trim().to_string()).collect(),
            DataFormat::Jsonl => serde_json::from_str::<Vec<String>>(line)
                .map_err(|e| malformed(format!("expected a JSON array of strings: {e}")))?,
        };
        facts.push(LabeledFact::from_tokens(&tokens).map_err(malformed)?);
    }
    Ok(facts)
}

/// Bijective label↔index tables for entities and relations.
///
/// Each vocabulary reserves two indices after its real entries: PAD at `len()`
/// and MASK at `len() + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    entities: Vec<String>,
    relations: Vec<String>,
    #[serde(skip)]
    entity_to_id: HashMap<String, usize>,
    #[serde(skip)]
    relation_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Assign ids in first-appearance order over `s r o a1 v1 ...` of each fact.
    pub fn build<'a>(facts: impl IntoIterator<Item = &'a LabeledFact>) -> Self {
        let mut vocab = Vocabulary::default();
        for fact in facts {
            vocab.intern_entity(&fact.subject);
            vocab.intern_relation(&fact.relation);
            vocab.intern_entity(&fact.object);
            for (a, v) in &fact.qualifiers {
                vocab.intern_relation(a);
                vocab.intern_entity(v);
            }
        }
        vocab
    }

    /// Rebuild from ordered label lists (e.g. when loading a checkpoint).
    pub fn from_labels(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for e in entities {
            if vocab.entity_to_id.contains_key(&e) {
                return Err(Error::InvalidArgument(format!("duplicate entity label {e:?}")));
            }
            vocab.intern_entity(&e);
        }
        for r in relations {
            if vocab.relation_to_id.contains_key(&r) {
                return Err(Error::InvalidArgument(format!("duplicate relation label {r:?}")));
            }
            vocab.intern_relation(&r);
        }
        Ok(vocab)
    }

    fn intern_entity(&mut self, label: &str) -> usize {
        if let Some(&id) = self.entity_to_id.get(label) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(label.to_string());
        self.entity_to_id.insert(label.to_string(), id);
        id
    }

    fn intern_relation(&mut self, label: &str) -> usize {
        if let Some(&id) = self.relation_to_id.get(label) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(label.to_string());
        self.relation_to_id.insert(label.to_string(), id);
        id
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_pad(&self) -> usize {
        self.entities.len()
    }

    pub fn entity_mask(&self) -> usize {
        self.entities.len() + 1
    }

    pub fn relation_pad(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_mask(&self) -> usize {
        self.relations.len() + 1
    }

    pub fn entity_id(&self, label: &str) -> Option<usize> {
        self.entity_to_id.get(label).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.relation_to_id.get(label).copied()
    }

    pub fn entity_label(&self, id: usize) -> Option<&str> {
        self.entities.get(id).map(String::as_str)
    }

    pub fn relation_label(&self, id: usize) -> Option<&str> {
        self.relations.get(id).map(String::as_str)
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relations
    }

    /// Map a labeled fact onto indices. Unknown labels are an error.
    pub fn index_fact(&self, fact: &LabeledFact) -> Result<HFact> {
        let ent = |l: &str| {
            self.entity_id(l)
                .ok_or_else(|| Error::UnknownLabel(l.to_string()))
        };
        let rel = |l: &str| {
            self.relation_id(l)
                .ok_or_else(|| Error::UnknownLabel(l.to_string()))
        };
        Ok(HFact {
            subject: ent(&fact.subject)?,
            relation: rel(&fact.relation)?,
            object: ent(&fact.object)?,
            qualifiers: fact
                .qualifiers
                .iter()
                .map(|(a, v)| Ok((rel(a)?, ent(v)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn label_fact(&self, fact: &HFact) -> LabeledFact {
        let e = |i: usize| self.entities[i].clone();
        let r = |i: usize| self.relations[i].clone();
        LabeledFact {
            subject: e(fact.subject),
            relation: r(fact.relation),
            object: e(fact.object),
            qualifiers: fact.qualifiers.iter().map(|&(a, v)| (r(a), e(v))).collect(),
        }
    }

    /// Restore the lookup maps after deserialization.
    pub fn rebuild_index(&mut self) {
        self.entity_to_id = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        self.relation_to_id = self
            .relations
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }
}

/// One hyper-relational fact over vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HFact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub qualifiers: Vec<(usize, usize)>,
}

impl HFact {
    pub fn triple(subject: usize, relation: usize, object: usize) -> Self {
        HFact {
            subject,
            relation,
            object,
            qualifiers: Vec::new(),
        }
    }

    pub fn with_qualifier(mut self, attribute: usize, value: usize) -> Self {
        self.qualifiers.push((attribute, value));
        self
    }

    pub fn arity(&self) -> usize {
        2 + self.qualifiers.len()
    }

    /// Number of sequence positions: `3 + 2·qualifiers`.
    pub fn num_positions(&self) -> usize {
        3 + 2 * self.qualifiers.len()
    }

    /// Element index at a sequence position.
    pub fn element(&self, position: usize) -> usize {
        match position {
            0 => self.subject,
            1 => self.relation,
            2 => self.object,
            p => {
                let (a, v) = self.qualifiers[(p - 3) / 2];
                if (p - 3) % 2 == 0 {
                    a
                } else {
                    v
                }
            }
        }
    }

    pub fn set_element(&mut self, position: usize, value: usize) {
        match position {
            0 => self.subject = value,
            1 => self.relation = value,
            2 => self.object = value,
            p => {
                let q = &mut self.qualifiers[(p - 3) / 2];
                if (p - 3) % 2 == 0 {
                    q.0 = value
                } else {
                    q.1 = value
                }
            }
        }
    }

    /// Entities of the fact in sequence order (duplicates kept).
    pub fn entities(&self) -> impl Iterator<Item = usize> + '_ {
        [self.subject, self.object]
            .into_iter()
            .chain(self.qualifiers.iter().map(|&(_, v)| v))
    }
}

/// True for positions holding an entity (s, o, and qualifier values).
pub fn is_entity_position(position: usize) -> bool {
    position == 0 || position == 2 || (position >= 3 && (position - 3) % 2 == 1)
}

/// The three standard splits, labeled.
#[derive(Debug, Clone, Default)]
pub struct LabeledSplits {
    pub train: Vec<LabeledFact>,
    pub valid: Option<Vec<LabeledFact>>,
    pub test: Vec<LabeledFact>,
}

impl LabeledSplits {
    pub fn all(&self) -> impl Iterator<Item = &LabeledFact> {
        self.train
            .iter()
            .chain(self.valid.iter().flatten())
            .chain(self.test.iter())
    }
}

const SPLIT_EXTENSIONS: [&str; 4] = ["txt", "tsv", "jsonl", "json"];

fn find_split(dir: &Path, name: &str) -> Option<PathBuf> {
    SPLIT_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

/// Load `train.*`, optional `valid.*`, and `test.*` from a directory.
///
/// With `format = None` each file's format is inferred from its extension.
pub fn load_splits(dir: &Path, format: Option<DataFormat>) -> Result<LabeledSplits> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let load = |name: &str| -> Result<Option<Vec<LabeledFact>>> {
        match find_split(dir, name) {
            Some(p) => {
                let fmt = format.unwrap_or_else(|| DataFormat::from_path(&p));
                parse_dataset(&p, fmt).map(Some)
            }
            None => Ok(None),
        }
    };
    let train = load("train")?;
    let valid = load("valid")?;
    let test = load("test")?;
    if train.is_none() && test.is_none() {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no train.* or test.* fact file in directory",
            ),
        ));
    }
    Ok(LabeledSplits {
        train: train.unwrap_or_default(),
        valid,
        test: test.unwrap_or_default(),
    })
}

/// Table-1 style summary of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_facts: usize,
    pub num_with_qualifiers: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub arity_min: usize,
    pub arity_max: usize,
    /// `(split name, fact count)`; a missing split is reported as `None`.
    pub splits: Vec<(String, Option<usize>)>,
}

/// Count facts, qualifier-bearing facts, distinct labels and the arity range.
pub fn dataset_statistics<'a>(facts: impl IntoIterator<Item = &'a LabeledFact>) -> DatasetStats {
    let mut entities = BTreeSet::new();
    let mut relations = BTreeSet::new();
    let mut num_facts = 0;
    let mut with_q = 0;
    let mut arity_min = usize::MAX;
    let mut arity_max = 0;
    for f in facts {
        num_facts += 1;
        if !f.qualifiers.is_empty() {
            with_q += 1;
        }
        arity_min = arity_min.min(f.arity());
        arity_max = arity_max.max(f.arity());
        entities.insert(f.subject.as_str());
        entities.insert(f.object.as_str());
        relations.insert(f.relation.as_str());
        for (a, v) in &f.qualifiers {
            relations.insert(a.as_str());
            entities.insert(v.as_str());
        }
    }
    DatasetStats {
        num_facts,
        num_with_qualifiers: with_q,
        num_entities: entities.len(),
        num_relations: relations.len(),
        arity_min: if num_facts == 0 { 0 } else { arity_min },
        arity_max,
        splits: Vec::new(),
    }
}

/// Statistics over the union of splits, with per-split sizes attached.
pub fn split_statistics(splits: &LabeledSplits) -> DatasetStats {
    let mut stats = dataset_statistics(splits.all());
    stats.splits = vec![
        ("train".to_string(), Some(splits.train.len())),
        ("valid".to_string(), splits.valid.as_ref().map(Vec::len)),
        ("test".to_string(), Some(splits.test.len())),
    ];
    stats
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = if self.num_facts == 0 {
            0.0
        } else {
            100.0 * self.num_with_qualifiers as f64 / self.num_facts as f64
        };
        let mut header = vec![
            "H-Facts".to_string(),
            "with Q".to_string(),
            "Entities".to_string(),
            "Relations".to_string(),
        ];
        let mut row = vec![
            self.num_facts.to_string(),
            format!("{} ({:.1}%)", self.num_with_qualifiers, pct),
            self.num_entities.to_string(),
            self.num_relations.to_string(),
        ];
        for (name, n) in &self.splits {
            header.push(capitalize(name));
            row.push(n.map_or_else(|| "-".to_string(), |n| n.to_string()));
        }
        header.push("Arity".to_string());
        row.push(format!("{}-{}", self.arity_min, self.arity_max));
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        writeln!(f, "{}", line(&header))?;
        write!(f, "{}", line(&row))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, format: DataFormat) -> Result<Vec<LabeledFact>> {
        parse_str(text, format, Path::new("mem"))
    }

    #[test]
    fn parses_fact_with_one_qualifier() {
        let facts = parse("Obama\tposition\tPresident\tstart\t2009\n", DataFormat::Tsv).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].arity(), 3);
        assert_eq!(
            facts[0].qualifiers,
            vec![("start".to_string(), "2009".to_string())]
        );
    }

    #[test]
    fn parses_minimal_triple() {
        let facts = parse("A\tr\tB", DataFormat::Tsv).unwrap();
        assert_eq!(facts[0].arity(), 2);
        assert!(facts[0].qualifiers.is_empty());
    }

    #[test]
    fn jsonl_matches_tsv() {
        let tsv = parse("A\tr\tB\tq\tC\nD\tr\tA\n", DataFormat::Tsv).unwrap();
        let json = parse(
            "[\"A\",\"r\",\"B\",\"q\",\"C\"]\n[\"D\",\"r\",\"A\"]\n",
            DataFormat::Jsonl,
        )
        .unwrap();
        assert_eq!(tsv, json);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse("A\tr\tB\nA\tr\tB\tq\n", DataFormat::Tsv).unwrap_err();
        match err {
            Error::MalformedFact { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse("A\tr\n", DataFormat::Tsv).unwrap_err();
        assert!(matches!(err, Error::MalformedFact { line: 1, .. }));
        let err = parse("{\"a\":1}\n", DataFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::MalformedFact { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_dataset(Path::new("/definitely/not/here.txt"), DataFormat::Tsv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn vocabulary_first_appearance_order() {
        let facts = parse("A\tr\tB\nC\tq\tA\tr\tD\n", DataFormat::Tsv).unwrap();
        let vocab = Vocabulary::build(&facts);
        assert_eq!(vocab.entity_labels(), ["A", "B", "C", "D"]);
        assert_eq!(vocab.relation_labels(), ["r", "q"]);
        assert_eq!(vocab.entity_pad(), 4);
        assert_eq!(vocab.entity_mask(), 5);
        assert_eq!(vocab.relation_pad(), 2);
        assert_eq!(vocab.relation_mask(), 3);
    }

    #[test]
    fn single_fact_vocabulary() {
        let facts = parse("A\tr\tB\n", DataFormat::Tsv).unwrap();
        let vocab = Vocabulary::build(&facts);
        assert_eq!((vocab.num_entities(), vocab.num_relations()), (2, 1));
    }

    #[test]
    fn index_and_label_round_trip() {
        let facts = parse("A\tr\tB\tq\tC\n", DataFormat::Tsv).unwrap();
        let vocab = Vocabulary::build(&facts);
        let indexed = vocab.index_fact(&facts[0]).unwrap();
        assert_eq!(vocab.label_fact(&indexed), facts[0]);
        let unknown = LabeledFact::from_tokens(&["Z", "r", "A"]).unwrap();
        assert!(matches!(vocab.index_fact(&unknown), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn single_triple_statistics() {
        let facts = parse("A\tr\tB\n", DataFormat::Tsv).unwrap();
        let s = dataset_statistics(&facts);
        assert_eq!(
            (
                s.num_facts,
                s.num_with_qualifiers,
                s.num_entities,
                s.num_relations,
                s.arity_min,
                s.arity_max
            ),
            (1, 0, 2, 1, 2, 2)
        );
    }

    #[test]
    fn positions_and_elements() {
        let f = HFact::triple(0, 1, 2).with_qualifier(3, 4).with_qualifier(5, 6);
        let elems: Vec<usize> = (0..f.num_positions()).map(|p| f.element(p)).collect();
        assert_eq!(elems, vec![0, 1, 2, 3, 4, 5, 6]);
        let ent: Vec<bool> = (0..7).map(is_entity_position).collect();
        assert_eq!(ent, vec![true, false, true, false, true, false, true]);
    }

    #[test]
    fn parsing_is_deterministic() {
        let text = "A\tr\tB\tq\tC\nC\ts\tD\n";
        let a = parse(text, DataFormat::Tsv).unwrap();
        let b = parse(text, DataFormat::Tsv).unwrap();
        assert_eq!(a, b);
        assert_eq!(Vocabulary::build(&a), Vocabulary::build(&b));
    }
}
