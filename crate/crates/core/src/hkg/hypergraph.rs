//! Entity hypergraph: one hyperedge per fact over its entity set.

use serde::{Deserialize, Serialize};

use super::data::HFact;
use crate::error::{Error, Result};

/// Binary node×hyperedge incidence stored in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    num_nodes: usize,
    /// Sorted, duplicate-free members of each hyperedge.
    hyperedges: Vec<Vec<usize>>,
    /// Hyperedges incident to each node, ascending.
    incident: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// Build from explicit member lists. Members are deduplicated; an empty
    /// hyperedge or an out-of-range member is an error.
    pub fn from_hyperedges(num_nodes: usize, members: Vec<Vec<usize>>) -> Result<Self> {
        let mut hyperedges = Vec::with_capacity(members.len());
        let mut incident = vec![Vec::new(); num_nodes];
        for (e, mut m) in members.into_iter().enumerate() {
            m.sort_unstable();
            m.dedup();
            if m.is_empty() {
                return Err(Error::InvalidArgument(format!("hyperedge {e} has no members")));
            }
            if let Some(&bad) = m.iter().find(|&&v| v >= num_nodes) {
                return Err(Error::Index(format!(
                    "hyperedge {e} member {bad} >= num_nodes {num_nodes}"
                )));
            }
            for &v in &m {
                incident[v].push(e);
            }
            hyperedges.push(m);
        }
        Ok(Hypergraph {
            num_nodes,
            hyperedges,
            incident,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn members(&self, e: usize) -> &[usize] {
        &self.hyperedges[e]
    }

    pub fn incident_hyperedges(&self, v: usize) -> &[usize] {
        &self.incident[v]
    }

    /// `h(v, e)`: 1 when `v` is a member of `e`.
    pub fn incidence(&self, v: usize, e: usize) -> u8 {
        u8::from(self.hyperedges[e].binary_search(&v).is_ok())
    }

    /// Number of hyperedges containing `v`.
    pub fn node_degree(&self, v: usize) -> Result<usize> {
        self.incident
            .get(v)
            .map(Vec::len)
            .ok_or_else(|| Error::Index(format!("node {v} >= num_nodes {}", self.num_nodes)))
    }

    /// Total number of nonzero incidence entries.
    pub fn nnz(&self) -> usize {
        self.hyperedges.iter().map(Vec::len).sum()
    }
}

/// One hyperedge per fact over `{s, o, v1..vm}`; relations are excluded.
pub fn build_hypergraph(facts: &[HFact], num_nodes: usize) -> Result<Hypergraph> {
    Hypergraph::from_hyperedges(num_nodes, facts.iter().map(|f| f.entities().collect()).collect())
}
