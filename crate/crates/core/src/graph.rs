//! Immutable directed multigraph with per-edge attribute vectors.
//!
//! Parallel edges are kept as distinct records, so the in/out neighborhoods
//! served here are multisets: a neighbor joined by `k` edges shows up `k`
//! times. Neighborhood iteration is always in ascending edge id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub src: NodeId,
    pub dst: NodeId,
    /// Ordering key for sequence generation.
    pub timestamp: f64,
    pub attrs: Vec<f64>,
}

impl EdgeRecord {
    pub fn new(src: NodeId, dst: NodeId, timestamp: f64, attrs: Vec<f64>) -> Self {
        Self {
            src,
            dst,
            timestamp,
            attrs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Multigraph {
    node_count: usize,
    attr_dim: usize,
    edges: Vec<EdgeRecord>,
    // CSR-style offsets into the id arrays below.
    out_offsets: Vec<usize>,
    out_ids: Vec<EdgeId>,
    in_offsets: Vec<usize>,
    in_ids: Vec<EdgeId>,
}

impl Multigraph {
    /// Builds the graph and its neighborhood indices. Edge ids follow input order.
    ///
    /// `attr_dim` fixes the attribute width; every record must match it.
    pub fn build(node_count: usize, attr_dim: usize, edges: Vec<EdgeRecord>) -> Result<Self> {
        if attr_dim == 0 {
            return Err(Error::Argument("attribute dimension must be positive".into()));
        }
        for (index, e) in edges.iter().enumerate() {
            if e.src >= node_count || e.dst >= node_count {
                return Err(Error::Construction {
                    index,
                    reason: format!(
                        "endpoint ({} -> {}) out of range for {} nodes",
                        e.src, e.dst, node_count
                    ),
                });
            }
            if e.attrs.len() != attr_dim {
                return Err(Error::Construction {
                    index,
                    reason: format!(
                        "attribute length {} does not match dimension {}",
                        e.attrs.len(),
                        attr_dim
                    ),
                });
            }
            if !e.timestamp.is_finite() || e.attrs.iter().any(|a| !a.is_finite()) {
                return Err(Error::Construction {
                    index,
                    reason: "non-finite timestamp or attribute".into(),
                });
            }
        }

        let (out_offsets, out_ids) = bucket(node_count, edges.iter().map(|e| e.src));
        let (in_offsets, in_ids) = bucket(node_count, edges.iter().map(|e| e.dst));
        Ok(Self {
            node_count,
            attr_dim,
            edges,
            out_offsets,
            out_ids,
            in_offsets,
            in_ids,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &EdgeRecord {
        &self.edges[id]
    }

    /// Edge ids leaving `v`, ascending.
    pub fn out_edge_ids(&self, v: NodeId) -> Result<&[EdgeId]> {
        self.check_node(v)?;
        Ok(&self.out_ids[self.out_offsets[v]..self.out_offsets[v + 1]])
    }

    /// Edge ids entering `v`, ascending.
    pub fn in_edge_ids(&self, v: NodeId) -> Result<&[EdgeId]> {
        self.check_node(v)?;
        Ok(&self.in_ids[self.in_offsets[v]..self.in_offsets[v + 1]])
    }

    pub fn edge_ids(&self, v: NodeId, dir: Direction) -> Result<&[EdgeId]> {
        match dir {
            Direction::In => self.in_edge_ids(v),
            Direction::Out => self.out_edge_ids(v),
        }
    }

    /// Multiset of out-neighbors as `(neighbor, edge id)` pairs.
    pub fn out_neighbors(&self, v: NodeId) -> Result<Vec<(NodeId, EdgeId)>> {
        Ok(self
            .out_edge_ids(v)?
            .iter()
            .map(|&e| (self.edges[e].dst, e))
            .collect())
    }

    /// Multiset of in-neighbors as `(neighbor, edge id)` pairs.
    pub fn in_neighbors(&self, v: NodeId) -> Result<Vec<(NodeId, EdgeId)>> {
        Ok(self
            .in_edge_ids(v)?
            .iter()
            .map(|&e| (self.edges[e].src, e))
            .collect())
    }

    pub fn neighbors(&self, v: NodeId, dir: Direction) -> Result<Vec<(NodeId, EdgeId)>> {
        match dir {
            Direction::In => self.in_neighbors(v),
            Direction::Out => self.out_neighbors(v),
        }
    }

    /// The endpoint of `edge` opposite to `center` when viewed from direction `dir`.
    pub fn opposite(&self, edge: EdgeId, dir: Direction) -> NodeId {
        match dir {
            Direction::In => self.edges[edge].src,
            Direction::Out => self.edges[edge].dst,
        }
    }

    pub fn degree(&self, v: NodeId, dir: Direction) -> usize {
        match dir {
            Direction::In => self.in_offsets[v + 1] - self.in_offsets[v],
            Direction::Out => self.out_offsets[v + 1] - self.out_offsets[v],
        }
    }

    pub fn max_degree(&self) -> usize {
        (0..self.node_count)
            .flat_map(|v| [self.degree(v, Direction::In), self.degree(v, Direction::Out)])
            .max()
            .unwrap_or(0)
    }

    /// Returns a copy whose attribute columns are rescaled to zero mean and unit
    /// variance. Constant columns are only centered.
    pub fn standardized(&self) -> (Multigraph, ColumnStats) {
        let stats = ColumnStats::from_edges(&self.edges, self.attr_dim);
        let mut g = self.clone();
        for e in &mut g.edges {
            stats.apply(&mut e.attrs);
        }
        (g, stats)
    }

    fn check_node(&self, v: NodeId) -> Result<()> {
        if v >= self.node_count {
            return Err(Error::Argument(format!(
                "node id {v} out of range for {} nodes",
                self.node_count
            )));
        }
        Ok(())
    }
}

fn bucket(node_count: usize, keys: impl Iterator<Item = NodeId> + Clone) -> (Vec<usize>, Vec<EdgeId>) {
    let mut offsets = vec![0usize; node_count + 1];
    for k in keys.clone() {
        offsets[k + 1] += 1;
    }
    for i in 0..node_count {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut ids = vec![0; offsets[node_count]];
    for (eid, k) in keys.enumerate() {
        ids[cursor[k]] = eid;
        cursor[k] += 1;
    }
    (offsets, ids)
}

/// Per-column mean and standard deviation of edge attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn from_edges(edges: &[EdgeRecord], dim: usize) -> Self {
        let n = edges.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for e in edges {
            for (m, a) in mean.iter_mut().zip(&e.attrs) {
                *m += a;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for e in edges {
            for ((s, a), m) in var.iter_mut().zip(&e.attrs).zip(&mean) {
                *s += (a - m) * (a - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, attrs: &mut [f64]) {
        for ((a, m), s) in attrs.iter_mut().zip(&self.mean).zip(&self.std) {
            *a -= m;
            if *s > 0.0 {
                *a /= s;
            }
        }
    }
}

/// Partially observed node labels; `true` marks an illicit account.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    labels: BTreeMap<NodeId, bool>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(
        node_count: usize,
        pairs: impl IntoIterator<Item = (NodeId, bool)>,
    ) -> Result<Self> {
        let mut set = Self::new();
        for (v, y) in pairs {
            set.insert(node_count, v, y)?;
        }
        Ok(set)
    }

    /// Inserts a label. Re-inserting the same label is a no-op; a conflicting
    /// one is an error.
    pub fn insert(&mut self, node_count: usize, v: NodeId, illicit: bool) -> Result<()> {
        if v >= node_count {
            return Err(Error::Label(format!(
                "labeled node {v} out of range for {node_count} nodes"
            )));
        }
        match self.labels.insert(v, illicit) {
            Some(prev) if prev != illicit => Err(Error::Label(format!(
                "conflicting labels for node {v}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn get(&self, v: NodeId) -> Option<bool> {
        self.labels.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, bool)> + '_ {
        self.labels.iter().map(|(&v, &y)| (v, y))
    }

    pub fn count_illicit(&self) -> usize {
        self.labels.values().filter(|&&y| y).count()
    }

    pub fn count_normal(&self) -> usize {
        self.len() - self.count_illicit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(src: NodeId, dst: NodeId, t: f64) -> EdgeRecord {
        EdgeRecord::new(src, dst, t, vec![1.0, t])
    }

    #[test]
    fn parallel_edges_repeat_neighbors() {
        // e4, e5, e6 all v3 -> v4
        let g = Multigraph::build(5, 2, vec![e(0, 1, 0.0), e(3, 4, 1.0), e(3, 4, 2.0), e(3, 4, 3.0)]).unwrap();
        let out: Vec<_> = g.out_neighbors(3).unwrap().into_iter().map(|(u, _)| u).collect();
        assert_eq!(out, vec![4, 4, 4]);
        let inn: Vec<_> = g.in_neighbors(4).unwrap().into_iter().map(|(u, _)| u).collect();
        assert_eq!(inn, vec![3, 3, 3]);
        assert_eq!(g.out_edge_ids(3).unwrap(), &[1, 2, 3]);
    }

    #[test]
    fn isolated_and_source_only_nodes() {
        let g = Multigraph::build(3, 2, vec![e(0, 1, 0.0)]).unwrap();
        assert!(g.out_neighbors(2).unwrap().is_empty());
        assert!(g.in_neighbors(0).unwrap().is_empty());
    }

    #[test]
    fn self_loop_once_per_direction() {
        let g = Multigraph::build(1, 2, vec![e(0, 0, 0.0)]).unwrap();
        assert_eq!(g.out_neighbors(0).unwrap(), vec![(0, 0)]);
        assert_eq!(g.in_neighbors(0).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = Multigraph::build(0, 1, vec![]).unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.max_degree(), 0);
    }

    #[test]
    fn duplicate_edges_retained() {
        let g = Multigraph::build(2, 2, vec![e(0, 1, 5.0), e(0, 1, 5.0)]).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.out_neighbors(0).unwrap().len(), 2);
    }

    #[test]
    fn out_of_range_endpoint_names_record() {
        let err = Multigraph::build(2, 2, vec![e(0, 1, 0.0), e(0, 2, 0.0)]).unwrap_err();
        match err {
            Error::Construction { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attr_dim_mismatch_rejected() {
        let err = Multigraph::build(2, 3, vec![e(0, 1, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::Construction { index: 0, .. }));
    }

    #[test]
    fn query_out_of_range_node() {
        let g = Multigraph::build(2, 2, vec![]).unwrap();
        assert!(matches!(g.out_neighbors(2), Err(Error::Argument(_))));
        assert!(matches!(g.in_neighbors(7), Err(Error::Argument(_))));
    }

    #[test]
    fn labels_conflict_and_duplicates() {
        let mut l = LabelSet::new();
        l.insert(4, 1, true).unwrap();
        l.insert(4, 1, true).unwrap();
        assert_eq!(l.len(), 1);
        assert!(l.insert(4, 1, false).is_err());
        assert!(l.insert(4, 4, false).is_err());
    }

    #[test]
    fn standardization_zero_mean_unit_var() {
        let g = Multigraph::build(2, 2, vec![e(0, 1, 1.0), e(0, 1, 3.0), e(1, 0, 5.0)]).unwrap();
        let (s, _) = g.standardized();
        let col: Vec<f64> = s.edges().iter().map(|e| e.attrs[1]).collect();
        let mean: f64 = col.iter().sum::<f64>() / 3.0;
        let var: f64 = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // constant column only centered
        assert!(s.edges().iter().all(|e| e.attrs[0] == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_graph() -> impl Strategy<Value = Multigraph> {
            (1usize..12).prop_flat_map(|n| {
                prop::collection::vec((0..n, 0..n, 0i64..20), 0..40).prop_map(move |es| {
                    let edges = es
                        .into_iter()
                        .map(|(s, d, t)| EdgeRecord::new(s, d, t as f64, vec![t as f64]))
                        .collect();
                    Multigraph::build(n, 1, edges).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn degrees_match_brute_force(g in arb_graph()) {
                let mut total_in = 0;
                for v in 0..g.node_count() {
                    let brute = g.edges().iter().map(|e| (e.src == v) as usize + (e.dst == v) as usize).sum::<usize>();
                    let ins = g.in_neighbors(v).unwrap();
                    let outs = g.out_neighbors(v).unwrap();
                    prop_assert_eq!(ins.len() + outs.len(), brute);
                    total_in += ins.len();
                    // ascending edge id, and ids round-trip
                    prop_assert!(outs.windows(2).all(|w| w[0].1 < w[1].1));
                    for (u, eid) in outs {
                        prop_assert_eq!(g.edge(eid).src, v);
                        prop_assert_eq!(g.edge(eid).dst, u);
                    }
                }
                prop_assert_eq!(total_in, g.edge_count());
            }
        }
    }
}
