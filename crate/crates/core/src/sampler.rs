//! Fixed-fan-out L-hop neighborhood sampling and epoch batching.
//!
//! Hop `k` samples, for every node needed at depth `k - 1`, up to
//! `fanouts[k - 1]` incoming and (independently) outgoing edges uniformly
//! without replacement. Parallel edges are separate sampling units. The node
//! set at depth `k` is the depth `k - 1` set plus every sampled neighbor, so
//! the layer that consumes hop `k` can find a representation for each center
//! and each neighbor.
//!
//! Randomness is keyed by `(seed, hop, node, direction)`, which makes a block
//! independent of the order in which frontier nodes are visited.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::graph::{Direction, EdgeId, Multigraph, NodeId};
use crate::rng::{derive_coords, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampledEdge {
    pub center: NodeId,
    pub direction: Direction,
    pub edge: EdgeId,
    pub neighbor: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hop {
    /// Nodes whose neighborhoods were sampled at this hop (sorted).
    pub centers: Vec<NodeId>,
    pub edges: Vec<SampledEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub targets: Vec<NodeId>,
    pub hops: Vec<Hop>,
    /// `depth_sets[k]`: sorted nodes needed at depth `k`; the last entry is
    /// the full node closure of the block.
    pub depth_sets: Vec<Vec<NodeId>>,
}

impl Block {
    pub fn nodes(&self) -> &[NodeId] {
        self.depth_sets.last().expect("depth 0 always present")
    }

    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }
}

fn direction_code(dir: Direction) -> u64 {
    match dir {
        Direction::In => 0,
        Direction::Out => 1,
    }
}

/// Samples an L-hop block around `targets`; `fanouts.len()` is L (may be 0).
pub fn sample_block(g: &Multigraph, targets: &[NodeId], fanouts: &[usize], seed: u64) -> Result<Block> {
    if targets.is_empty() {
        return Err(Error::Argument("cannot sample a block without targets".into()));
    }
    if fanouts.contains(&0) {
        return Err(Error::Argument("fan-outs must be at least 1".into()));
    }
    for &t in targets {
        if t >= g.node_count() {
            return Err(Error::Argument(format!("target {t} out of range")));
        }
    }
    let mut depth: BTreeSet<NodeId> = targets.iter().copied().collect();
    let mut depth_sets = vec![depth.iter().copied().collect::<Vec<_>>()];
    let mut hops = Vec::with_capacity(fanouts.len());
    for (k, &fanout) in fanouts.iter().enumerate() {
        let centers: Vec<NodeId> = depth.iter().copied().collect();
        let mut edges = Vec::new();
        for &v in &centers {
            for dir in [Direction::In, Direction::Out] {
                let ids = g.edge_ids(v, dir)?;
                let mut rng = stream(derive_coords(seed, &[k as u64, v as u64, direction_code(dir)]));
                let mut picked: Vec<EdgeId> = if ids.len() <= fanout {
                    ids.to_vec()
                } else {
                    index::sample(&mut rng, ids.len(), fanout)
                        .into_iter()
                        .map(|i| ids[i])
                        .collect()
                };
                picked.sort_unstable();
                edges.extend(picked.into_iter().map(|e| SampledEdge {
                    center: v,
                    direction: dir,
                    edge: e,
                    neighbor: g.opposite(e, dir),
                }));
            }
        }
        depth.extend(edges.iter().map(|e| e.neighbor));
        depth_sets.push(depth.iter().copied().collect());
        hops.push(Hop { centers, edges });
    }
    Ok(Block {
        targets: targets.to_vec(),
        hops,
        depth_sets,
    })
}

/// Shuffles `nodes` and cuts the permutation into chunks of `batch_size`.
pub fn batches(nodes: &[NodeId], batch_size: usize, seed: u64) -> Result<Vec<Vec<NodeId>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut perm = nodes.to_vec();
    perm.shuffle(&mut stream(seed));
    Ok(perm.chunks(batch_size).map(<[NodeId]>::to_vec).collect())
}
