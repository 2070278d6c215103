//! Time-evolving graph storage.
//!
//! The graph accumulates monotonically: nodes and edges, once added, are
//! present in every later snapshot. Purification never deletes an edge —
//! removed edges are tombstoned and excluded from the purified view, so a
//! benchmark can audit every decision after the fact.
//!
//! Undirected simple graphs only: each pair is stored once in canonical
//! `(min, max)` order and self-loops are rejected; the normalized
//! adjacency adds self-loops virtually.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::AggregationWeights;
use crate::error::{Error, Result};
use crate::mathx;
use crate::tensor::Tensor;

/// External node identifier, as it appears in input streams.
pub type NodeId = u64;

/// Undirected edge held in canonical order (`u < v`).
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    u: NodeId,
    v: NodeId,
}

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Result<Self> {
        if a == b {
            return Err(Error::ingestion(format!("self-loop at node {a}")));
        }
        Ok(Edge {
            u: a.min(b),
            v: a.max(b),
        })
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        (self.u, self.v)
    }
}

impl core::fmt::Display for Edge {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

/// Which snapshot an adjacency query reads.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum View {
    /// Everything accumulated so far, including edges later flagged as noise.
    Unpurified,
    /// Accumulated graph minus all removed edges.
    Purified,
}

/// The change arriving at one time step.
#[derive(Clone, Debug, Default)]
pub struct Delta {
    pub new_nodes: Vec<NodeId>,
    pub new_edges: Vec<Edge>,
}

/// Static per-node attributes, supplied up front for every node that may
/// ever appear.
#[derive(Clone, Debug)]
pub struct NodeAttributes {
    pub features: Vec<f64>,
    pub label: Option<u32>,
}

/// Disjoint train/validation/test node sets, fixed once per run and
/// reused at every time step.
#[derive(Clone, Debug, Default)]
pub struct NodeSplit {
    pub train: BTreeSet<NodeId>,
    pub val: BTreeSet<NodeId>,
    pub test: BTreeSet<NodeId>,
}

pub struct TemporalGraph {
    feature_dim: usize,
    attributes: BTreeMap<NodeId, NodeAttributes>,
    step: usize,
    index: BTreeMap<NodeId, u32>,
    ext_ids: Vec<NodeId>,
    first_seen: Vec<usize>,
    adj_full: Vec<BTreeSet<u32>>,
    adj_purified: Vec<BTreeSet<u32>>,
    edge_step: BTreeMap<(u32, u32), usize>,
    edges_by_step: Vec<Vec<(u32, u32)>>,
    removed: BTreeSet<(u32, u32)>,
    // Row-major feature rows in appearance order.
    features: Vec<f64>,
    labels: Vec<Option<u32>>,
    num_classes: usize,
}

impl TemporalGraph {
    /// Empty graph at step 0. `attributes` is the universe of nodes that
    /// may appear; a delta referencing an id outside it is rejected.
    pub fn new(feature_dim: usize, attributes: BTreeMap<NodeId, NodeAttributes>) -> Result<Self> {
        for (id, attr) in &attributes {
            if attr.features.len() != feature_dim {
                return Err(Error::ingestion(format!(
                    "node {id}: {} feature values, expected {feature_dim}",
                    attr.features.len()
                )));
            }
        }
        let num_classes = attributes
            .values()
            .filter_map(|a| a.label)
            .map(|l| l as usize + 1)
            .max()
            .unwrap_or(0);
        Ok(TemporalGraph {
            feature_dim,
            attributes,
            step: 0,
            index: BTreeMap::new(),
            ext_ids: Vec::new(),
            first_seen: Vec::new(),
            adj_full: Vec::new(),
            adj_purified: Vec::new(),
            edge_step: BTreeMap::new(),
            edges_by_step: Vec::new(),
            removed: BTreeSet::new(),
            features: Vec::new(),
            labels: Vec::new(),
            num_classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of distinct class labels in the attribute universe.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Current time step (0 before the first delta).
    pub fn current_step(&self) -> usize {
        self.step
    }

    /// Nodes that have appeared so far.
    pub fn num_nodes(&self) -> usize {
        self.ext_ids.len()
    }

    pub fn num_edges(&self, view: View) -> usize {
        match view {
            View::Unpurified => self.edge_step.len(),
            View::Purified => self.edge_step.len() - self.removed.len(),
        }
    }

    pub fn contains_node(&self, v: NodeId) -> bool {
        self.index.contains_key(&v)
    }

    /// Internal dense index of an external id.
    pub fn node_index(&self, v: NodeId) -> Option<u32> {
        self.index.get(&v).copied()
    }

    /// External id of an internal index.
    pub fn node_id(&self, idx: u32) -> NodeId {
        self.ext_ids[idx as usize]
    }

    pub fn first_seen_step(&self, idx: u32) -> usize {
        self.first_seen[idx as usize]
    }

    /// Ingest one step. The delta's nodes and edges must be genuinely new
    /// and every edge endpoint must exist after the delta's nodes join.
    pub fn apply_delta(&mut self, delta: &Delta) -> Result<()> {
        // Validate before mutating so a bad delta leaves the graph intact.
        let mut joining = BTreeSet::new();
        for &id in &delta.new_nodes {
            if self.index.contains_key(&id) {
                return Err(Error::ingestion(format!("node {id} already present")));
            }
            if !joining.insert(id) {
                return Err(Error::ingestion(format!("node {id} repeated in delta")));
            }
            if !self.attributes.contains_key(&id) {
                return Err(Error::ingestion(format!("node {id} has no attributes")));
            }
        }
        let mut fresh = BTreeSet::new();
        for e in &delta.new_edges {
            let (u, v) = e.endpoints();
            for w in [u, v] {
                if !self.index.contains_key(&w) && !joining.contains(&w) {
                    return Err(Error::ingestion(format!(
                        "edge {e} references unknown node {w}"
                    )));
                }
            }
            if !fresh.insert((u, v)) {
                return Err(Error::ingestion(format!("edge {e} repeated in delta")));
            }
            if let (Some(&iu), Some(&iv)) = (self.index.get(&u), self.index.get(&v)) {
                let key = (iu.min(iv), iu.max(iv));
                if self.edge_step.contains_key(&key) {
                    return Err(Error::ingestion(format!("edge {e} already present")));
                }
            }
        }

        self.step += 1;
        for &id in &delta.new_nodes {
            let idx = self.ext_ids.len() as u32;
            self.index.insert(id, idx);
            self.ext_ids.push(id);
            self.first_seen.push(self.step);
            self.adj_full.push(BTreeSet::new());
            self.adj_purified.push(BTreeSet::new());
            let attr = &self.attributes[&id];
            self.features.extend_from_slice(&attr.features);
            self.labels.push(attr.label);
        }
        let mut step_edges = Vec::with_capacity(delta.new_edges.len());
        for e in &delta.new_edges {
            let (u, v) = e.endpoints();
            let (iu, iv) = (self.index[&u], self.index[&v]);
            let key = (iu.min(iv), iu.max(iv));
            self.edge_step.insert(key, self.step);
            self.adj_full[iu as usize].insert(iv);
            self.adj_full[iv as usize].insert(iu);
            self.adj_purified[iu as usize].insert(iv);
            self.adj_purified[iv as usize].insert(iu);
            step_edges.push(key);
        }
        self.edges_by_step.push(step_edges);
        Ok(())
    }

    /// The edges that arrived at `step` (1-based), in insertion order.
    pub fn delta_edges(&self, step: usize) -> Vec<Edge> {
        if step == 0 || step > self.edges_by_step.len() {
            return Vec::new();
        }
        self.edges_by_step[step - 1]
            .iter()
            .map(|&(iu, iv)| {
                Edge::new(self.ext_ids[iu as usize], self.ext_ids[iv as usize])
                    .expect("stored edges are never self-loops")
            })
            .collect()
    }

    /// Neighbors of `v` in ascending external-id order.
    pub fn neighbors(&self, v: NodeId, view: View) -> Result<Vec<NodeId>> {
        let idx = self
            .index
            .get(&v)
            .ok_or_else(|| Error::lookup(format!("unknown node {v}")))?;
        let set = self.adjacency(view, *idx);
        let mut out: Vec<NodeId> = set.iter().map(|&i| self.ext_ids[i as usize]).collect();
        out.sort_unstable();
        Ok(out)
    }

    fn adjacency(&self, view: View, idx: u32) -> &BTreeSet<u32> {
        match view {
            View::Unpurified => &self.adj_full[idx as usize],
            View::Purified => &self.adj_purified[idx as usize],
        }
    }

    /// Internal-index adjacency, for scoring loops.
    pub fn neighbors_internal(&self, idx: u32, view: View) -> &BTreeSet<u32> {
        self.adjacency(view, idx)
    }

    pub fn degree(&self, v: NodeId, view: View) -> Result<usize> {
        let idx = self
            .index
            .get(&v)
            .ok_or_else(|| Error::lookup(format!("unknown node {v}")))?;
        Ok(self.adjacency(view, *idx).len())
    }

    pub fn has_edge(&self, e: &Edge, view: View) -> bool {
        let (u, v) = e.endpoints();
        match (self.index.get(&u), self.index.get(&v)) {
            (Some(&iu), Some(&iv)) => self.adjacency(view, iu).contains(&iv),
            _ => false,
        }
    }

    /// Flag edges as noise; purified views exclude them from now on.
    pub fn remove_edges(&mut self, edges: &[Edge]) -> Result<()> {
        // Validate the whole batch first.
        let mut keys = Vec::with_capacity(edges.len());
        for e in edges {
            let (u, v) = e.endpoints();
            let (iu, iv) = match (self.index.get(&u), self.index.get(&v)) {
                (Some(&a), Some(&b)) => (a, b),
                _ => return Err(Error::contract(format!("removing absent edge {e}"))),
            };
            let key = (iu.min(iv), iu.max(iv));
            if !self.edge_step.contains_key(&key) {
                return Err(Error::contract(format!("removing absent edge {e}")));
            }
            if self.removed.contains(&key) {
                return Err(Error::contract(format!("edge {e} already removed")));
            }
            keys.push(key);
        }
        for key in keys {
            self.removed.insert(key);
            self.adj_purified[key.0 as usize].remove(&key.1);
            self.adj_purified[key.1 as usize].remove(&key.0);
        }
        Ok(())
    }

    pub fn removed_edges(&self) -> Vec<Edge> {
        self.removed
            .iter()
            .map(|&(iu, iv)| {
                Edge::new(self.ext_ids[iu as usize], self.ext_ids[iv as usize])
                    .expect("stored edges are never self-loops")
            })
            .collect()
    }

    /// All edges of a view in canonical ascending order.
    pub fn edges(&self, view: View) -> Vec<Edge> {
        let mut out: Vec<Edge> = self
            .edge_step
            .keys()
            .filter(|key| match view {
                View::Unpurified => true,
                View::Purified => !self.removed.contains(key),
            })
            .map(|&(iu, iv)| {
                Edge::new(self.ext_ids[iu as usize], self.ext_ids[iv as usize])
                    .expect("stored edges are never self-loops")
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Symmetric GCN aggregation weights for a view:
    /// `A_ij = 1 / sqrt((deg_i + 1)(deg_j + 1))` over edges plus virtual
    /// self-loops `A_ii = 1 / (deg_i + 1)`.
    pub fn normalized_adjacency(&self, view: View) -> AggregationWeights {
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / mathx::sqrt(self.adjacency(view, i as u32).len() as f64 + 1.0))
            .collect();
        let mut triples = Vec::with_capacity(n + 2 * self.num_edges(view));
        for i in 0..n {
            triples.push((i as u32, i as u32, inv_sqrt[i] * inv_sqrt[i]));
            for &j in self.adjacency(view, i as u32) {
                triples.push((i as u32, j, inv_sqrt[i] * inv_sqrt[j as usize]));
            }
        }
        AggregationWeights {
            num_nodes: n,
            triples,
        }
    }

    /// Feature matrix over nodes that have appeared, in appearance order.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.num_nodes(), self.feature_dim], self.features.clone())
            .expect("feature row length is enforced on ingest")
    }

    /// Label of an internal index, if the node is labeled.
    pub fn label_of(&self, idx: u32) -> Option<u32> {
        self.labels[idx as usize]
    }

    /// All node ids in the attribute universe that carry labels.
    pub fn labeled_universe(&self) -> Vec<NodeId> {
        self.attributes
            .iter()
            .filter(|(_, a)| a.label.is_some())
            .map(|(&id, _)| id)
            .collect()
    }

    /// Unordered active-node pairs that are not edges in the unpurified
    /// view, as a count.
    pub fn num_non_edges(&self) -> usize {
        let n = self.num_nodes();
        n * (n - 1) / 2 - self.num_edges(View::Unpurified)
    }
}
