//! Chronological per-node edge-attribute sequences.
//!
//! Edges are ordered by `(timestamp, edge id)` and truncated to the `t_max`
//! most recent. A direction with no edges gets a single zero-attribute
//! self-loop entry so both sequences are always non-empty.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Direction, EdgeId, Multigraph, NodeId};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSequences {
    pub node: NodeId,
    pub x_in: Vec<Vec<f64>>,
    pub x_out: Vec<Vec<f64>>,
    /// Timestamps aligned with `x_in`; padding uses `-inf`.
    pub t_in: Vec<f64>,
    pub t_out: Vec<f64>,
}

impl EdgeSequences {
    pub fn get(&self, dir: Direction) -> &[Vec<f64>] {
        match dir {
            Direction::In => &self.x_in,
            Direction::Out => &self.x_out,
        }
    }
}

fn direction_sequence(g: &Multigraph, v: NodeId, dir: Direction, t_max: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut ids: Vec<EdgeId> = g.edge_ids(v, dir)?.to_vec();
    if ids.is_empty() {
        return Ok((vec![vec![0.0; g.attr_dim()]], vec![f64::NEG_INFINITY]));
    }
    ids.sort_by(|&a, &b| {
        g.edge(a)
            .timestamp
            .total_cmp(&g.edge(b).timestamp)
            .then(a.cmp(&b))
    });
    let start = ids.len().saturating_sub(t_max);
    let kept = &ids[start..];
    Ok((
        kept.iter().map(|&e| g.edge(e).attrs.clone()).collect(),
        kept.iter().map(|&e| g.edge(e).timestamp).collect(),
    ))
}

pub fn build_sequences(g: &Multigraph, v: NodeId, t_max: usize) -> Result<EdgeSequences> {
    if t_max == 0 {
        return Err(Error::Argument("t_max must be at least 1".into()));
    }
    let (x_in, t_in) = direction_sequence(g, v, Direction::In, t_max)?;
    let (x_out, t_out) = direction_sequence(g, v, Direction::Out, t_max)?;
    Ok(EdgeSequences {
        node: v,
        x_in,
        x_out,
        t_in,
        t_out,
    })
}

pub fn build_all(g: &Multigraph, t_max: usize, nodes: &[NodeId]) -> Result<BTreeMap<NodeId, EdgeSequences>> {
    nodes
        .iter()
        .map(|&v| build_sequences(g, v, t_max).map(|s| (v, s)))
        .collect()
}

/// Sequences for every node of a graph, built once and indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache {
    t_max: usize,
    attr_dim: usize,
    seqs: Vec<EdgeSequences>,
}

impl SequenceCache {
    pub fn new(g: &Multigraph, t_max: usize) -> Result<Self> {
        let seqs = (0..g.node_count())
            .map(|v| build_sequences(g, v, t_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t_max,
            attr_dim: g.attr_dim(),
            seqs,
        })
    }

    pub fn from_sequences(t_max: usize, attr_dim: usize, seqs: Vec<EdgeSequences>) -> Self {
        Self { t_max, attr_dim, seqs }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn get(&self, v: NodeId) -> &EdgeSequences {
        &self.seqs[v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeRecord;
    use proptest::prelude::*;

    fn rec(src: NodeId, dst: NodeId, t: f64) -> EdgeRecord {
        EdgeRecord::new(src, dst, t, vec![t, 1.0])
    }

    #[test]
    fn keeps_most_recent_in_order() {
        let g = Multigraph::build(2, 2, vec![rec(0, 1, 5.0), rec(0, 1, 1.0), rec(0, 1, 3.0)]).unwrap();
        let s = build_sequences(&g, 0, 2).unwrap();
        let ts: Vec<f64> = s.x_out.iter().map(|a| a[0]).collect();
        assert_eq!(ts, vec![3.0, 5.0]);
    }

    #[test]
    fn empty_direction_padded_with_zero_self_loop() {
        let g = Multigraph::build(2, 2, vec![rec(0, 1, 5.0)]).unwrap();
        let s = build_sequences(&g, 0, 4).unwrap();
        assert_eq!(s.x_in, vec![vec![0.0, 0.0]]);
        assert_eq!(s.t_in, vec![f64::NEG_INFINITY]);
        assert_eq!(s.x_out.len(), 1);
    }

    #[test]
    fn ties_break_on_edge_id() {
        let mut edges = vec![rec(0, 1, 2.0), rec(0, 1, 2.0), rec(0, 1, 2.0)];
        for (i, e) in edges.iter_mut().enumerate() {
            e.attrs[1] = i as f64;
        }
        let g = Multigraph::build(2, 2, edges).unwrap();
        let s = build_sequences(&g, 1, 8).unwrap();
        assert_eq!(s.x_in.iter().map(|a| a[1]).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_t_max_rejected() {
        let g = Multigraph::build(1, 2, vec![]).unwrap();
        assert!(matches!(build_sequences(&g, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn build_all_batch() {
        let g = Multigraph::build(3, 2, vec![rec(0, 1, 1.0), rec(1, 2, 2.0)]).unwrap();
        let all = build_all(&g, 4, &[0, 1, 2]).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all, build_all(&g, 4, &[0, 1, 2]).unwrap());
        assert!(build_all(&g, 4, &[0, 3]).is_err());
        let cache = SequenceCache::new(&g, 4).unwrap();
        assert_eq!(cache.get(1), &all[&1]);
    }

    fn arb_edges() -> impl Strategy<Value = Vec<(usize, usize, u8)>> {
        prop::collection::vec((0usize..4, 0usize..4, 0u8..10), 0..30)
    }

    fn graph_of(es: &[(usize, usize, u8)]) -> Multigraph {
        let edges = es
            .iter()
            .enumerate()
            .map(|(i, &(s, d, t))| EdgeRecord::new(s, d, t as f64, vec![t as f64, i as f64]))
            .collect();
        Multigraph::build(4, 2, edges).unwrap()
    }

    proptest! {
        #[test]
        fn chronological_bounded_nonempty(es in arb_edges(), t_max in 1usize..6) {
            let g = graph_of(&es);
            for v in 0..4 {
                let s = build_sequences(&g, v, t_max).unwrap();
                for (x, t) in [(&s.x_in, &s.t_in), (&s.x_out, &s.t_out)] {
                    prop_assert!(!x.is_empty() && x.len() <= t_max);
                    prop_assert_eq!(x.len(), t.len());
                    prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }

        #[test]
        fn truncation_is_suffix(es in arb_edges(), k in 1usize..6) {
            let g = graph_of(&es);
            for v in 0..4 {
                let full = build_sequences(&g, v, usize::MAX).unwrap();
                let cut = build_sequences(&g, v, k).unwrap();
                let tail = &full.x_out[full.x_out.len().saturating_sub(k)..];
                prop_assert_eq!(&cut.x_out[..], tail);
                let tail = &full.x_in[full.x_in.len().saturating_sub(k)..];
                prop_assert_eq!(&cut.x_in[..], tail);
            }
        }

        #[test]
        fn outgoing_unaffected_by_incoming_edits(es in arb_edges(), extra in prop::collection::vec((0usize..4, 0u8..10), 1..5)) {
            let g = graph_of(&es);
            // add edges that only enter node 0 (from nodes other than 0)
            let mut more = es.clone();
            for (s, t) in extra {
                more.push(((s % 3) + 1, 0, t));
            }
            let g2 = graph_of(&more);
            let a = build_sequences(&g, 0, 5).unwrap();
            let b = build_sequences(&g2, 0, 5).unwrap();
            prop_assert_eq!(a.x_out, b.x_out);
        }
    }
}
