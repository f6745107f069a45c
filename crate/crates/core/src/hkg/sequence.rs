//! Sequence view of a fact: role-tagged tokens and the pairwise edge-type taxonomy.
//!
//! Layout is `[s, r, o, a1, v1, a2, v2, ...]`; positions `3+2k` and `4+2k`
//! belong to qualifier `k`. Unused tail slots are padding.

use serde::{Deserialize, Serialize};

use super::data::{HFact, Vocabulary};
use crate::error::{Error, Result};

pub const NUM_ROLES: usize = 5;
pub const NUM_EDGE_TYPES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoleTag {
    S,
    R,
    O,
    A,
    V,
    Pad,
}

impl RoleTag {
    /// Role of a position in an unpadded layout.
    pub fn of_position(position: usize) -> RoleTag {
        match position {
            0 => RoleTag::S,
            1 => RoleTag::R,
            2 => RoleTag::O,
            p if (p - 3) % 2 == 0 => RoleTag::A,
            _ => RoleTag::V,
        }
    }

    /// Index into the five role-specific parameter groups; `None` for padding.
    pub fn index(self) -> Option<usize> {
        match self {
            RoleTag::S => Some(0),
            RoleTag::R => Some(1),
            RoleTag::O => Some(2),
            RoleTag::A => Some(3),
            RoleTag::V => Some(4),
            RoleTag::Pad => None,
        }
    }

    pub fn is_entity(self) -> bool {
        matches!(self, RoleTag::S | RoleTag::O | RoleTag::V)
    }

    pub fn is_relation(self) -> bool {
        matches!(self, RoleTag::R | RoleTag::A)
    }
}

/// Undirected type of the edge between two sequence positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    SelfLoop,
    SR,
    SO,
    RO,
    SA,
    SV,
    RA,
    RV,
    OA,
    OV,
    /// Attribute and value of the same qualifier.
    AiVi,
    AiAj,
    ViVj,
    /// Attribute and value of different qualifiers.
    AiVj,
    /// Either endpoint is padding; carries no parameters.
    Pad,
}

impl EdgeType {
    pub const ALL: [EdgeType; NUM_EDGE_TYPES] = [
        EdgeType::SelfLoop,
        EdgeType::SR,
        EdgeType::SO,
        EdgeType::RO,
        EdgeType::SA,
        EdgeType::SV,
        EdgeType::RA,
        EdgeType::RV,
        EdgeType::OA,
        EdgeType::OV,
        EdgeType::AiVi,
        EdgeType::AiAj,
        EdgeType::ViVj,
        EdgeType::AiVj,
    ];

    /// Row of this type in the edge-bias tables; `None` for [`EdgeType::Pad`].
    pub fn index(self) -> Option<usize> {
        EdgeType::ALL.iter().position(|&t| t == self)
    }
}

/// Edge type between positions `i` and `j` of a fact with `num_real_positions` tokens.
pub fn edge_type(i: usize, j: usize, num_real_positions: usize) -> EdgeType {
    use RoleTag::*;
    if i >= num_real_positions || j >= num_real_positions {
        return EdgeType::Pad;
    }
    if i == j {
        return EdgeType::SelfLoop;
    }
    let (lo, hi) = if i < j { (i, j) } else { (j, i) };
    let qualifier = |p: usize| (p - 3) / 2;
    match (RoleTag::of_position(lo), RoleTag::of_position(hi)) {
        (S, R) => EdgeType::SR,
        (S, O) => EdgeType::SO,
        (R, O) => EdgeType::RO,
        (S, A) => EdgeType::SA,
        (S, V) => EdgeType::SV,
        (R, A) => EdgeType::RA,
        (R, V) => EdgeType::RV,
        (O, A) => EdgeType::OA,
        (O, V) => EdgeType::OV,
        (A, A) => EdgeType::AiAj,
        (V, V) => EdgeType::ViVj,
        (A, V) | (V, A) => {
            if qualifier(lo) == qualifier(hi) {
                EdgeType::AiVi
            } else {
                EdgeType::AiVj
            }
        }
        (a, b) => unreachable!("positions ordered lo<hi cannot yield ({a:?}, {b:?})"),
    }
}

/// Edge types for all pairs of a length-`len` layout, row-major, with padding
/// left to the per-row validity mask (every position is treated as real).
pub fn edge_type_matrix(len: usize) -> Vec<EdgeType> {
    let mut out = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            out.push(edge_type(i, j, len));
        }
    }
    out
}

/// Role-tagged element sequence of fixed length `3 + 2·max_qualifiers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactSequence {
    pub tokens: Vec<(usize, RoleTag)>,
}

impl FactSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.tokens.iter().filter(|(_, r)| *r != RoleTag::Pad).count()
    }

    /// Strip padding and rebuild the fact.
    pub fn to_fact(&self) -> Result<HFact> {
        let real: Vec<usize> = self
            .tokens
            .iter()
            .take_while(|(_, r)| *r != RoleTag::Pad)
            .map(|&(e, _)| e)
            .collect();
        if real.len() < 3 || real.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "sequence has {} real tokens; expected 3 + 2k",
                real.len()
            )));
        }
        Ok(HFact {
            subject: real[0],
            relation: real[1],
            object: real[2],
            qualifiers: real[3..].chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }
}

/// Lay a fact out as `[s, r, o, a1, v1, ...]` padded to `max_qualifiers`.
///
/// Padding slots hold the PAD index of the vocabulary their slot would use.
pub fn fact_to_sequence(fact: &HFact, max_qualifiers: usize, vocab: &Vocabulary) -> Result<FactSequence> {
    if fact.qualifiers.len() > max_qualifiers {
        return Err(Error::Capacity {
            qualifiers: fact.qualifiers.len(),
            max: max_qualifiers,
        });
    }
    let len = 3 + 2 * max_qualifiers;
    let n = fact.num_positions();
    let tokens = (0..len)
        .map(|p| {
            if p < n {
                (fact.element(p), RoleTag::of_position(p))
            } else if RoleTag::of_position(p) == RoleTag::A {
                (vocab.relation_pad(), RoleTag::Pad)
            } else {
                (vocab.entity_pad(), RoleTag::Pad)
            }
        })
        .collect();
    Ok(FactSequence { tokens })
}

/// Sequence length needed for a maximum qualifier count.
pub fn sequence_len(max_qualifiers: usize) -> usize {
    3 + 2 * max_qualifiers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hkg::data::LabeledFact;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn vocab() -> Vocabulary {
        let f = LabeledFact::from_tokens(&["A", "r", "B", "q", "C", "p", "D"]).unwrap();
        Vocabulary::build([&f])
    }

    #[test]
    fn padding_tail() {
        let v = vocab();
        let fact = HFact::triple(0, 0, 1).with_qualifier(1, 2);
        let seq = fact_to_sequence(&fact, 2, &v).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.tokens[5], (v.relation_pad(), RoleTag::Pad));
        assert_eq!(seq.tokens[6], (v.entity_pad(), RoleTag::Pad));
        assert_eq!(seq.tokens[3].1, RoleTag::A);
        assert_eq!(seq.tokens[4].1, RoleTag::V);
    }

    #[test]
    fn triple_without_capacity() {
        let v = vocab();
        let seq = fact_to_sequence(&HFact::triple(0, 0, 1), 0, &v).unwrap();
        assert_eq!(
            seq.tokens,
            vec![(0, RoleTag::S), (0, RoleTag::R), (1, RoleTag::O)]
        );
    }

    #[test]
    fn capacity_error() {
        let v = vocab();
        let fact = HFact::triple(0, 0, 1).with_qualifier(1, 2);
        assert!(matches!(
            fact_to_sequence(&fact, 0, &v),
            Err(Error::Capacity { qualifiers: 1, max: 0 })
        ));
    }

    #[test]
    fn wd50k_sized_sequence() {
        // arity 67 → 65 qualifiers
        assert_eq!(sequence_len(65), 133);
    }

    #[test]
    fn named_edge_types() {
        assert_eq!(edge_type(0, 1, 7), EdgeType::SR);
        assert_eq!(edge_type(2, 4, 7), EdgeType::OV);
        assert_eq!(edge_type(3, 4, 7), EdgeType::AiVi);
        assert_eq!(edge_type(3, 6, 7), EdgeType::AiVj);
        assert_eq!(edge_type(5, 5, 7), EdgeType::SelfLoop);
        assert_eq!(edge_type(3, 5, 7), EdgeType::AiAj);
        assert_eq!(edge_type(4, 6, 7), EdgeType::ViVj);
        assert_eq!(edge_type(0, 6, 5), EdgeType::Pad);
    }

    #[test]
    fn arity_four_covers_all_types() {
        let n = 7;
        let seen: BTreeSet<EdgeType> = (0..n)
            .flat_map(|i| (0..n).map(move |j| edge_type(i, j, n)))
            .collect();
        assert_eq!(seen.len(), NUM_EDGE_TYPES);
        assert!(!seen.contains(&EdgeType::Pad));
        assert_eq!(EdgeType::ALL.len(), 14);
    }

    proptest! {
        #[test]
        fn edge_type_symmetric(n in 3usize..20, i in 0usize..24, j in 0usize..24) {
            prop_assert_eq!(edge_type(i, j, n), edge_type(j, i, n));
            if i < n && j < n {
                prop_assert!(edge_type(i, j, n).index().is_some());
            }
        }

        #[test]
        fn sequence_round_trip(
            s in 0usize..4, r in 0usize..3, o in 0usize..4,
            quals in proptest::collection::vec((0usize..3, 0usize..4), 0..4),
            extra in 0usize..3,
        ) {
            let v = vocab();
            let fact = HFact { subject: s, relation: r, object: o, qualifiers: quals.clone() };
            let seq = fact_to_sequence(&fact, quals.len() + extra, &v).unwrap();
            prop_assert_eq!(seq.num_real(), fact.num_positions());
            prop_assert_eq!(seq.to_fact().unwrap(), fact);
        }
    }
}
