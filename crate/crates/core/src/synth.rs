//! Seeded generator of transaction multigraphs with planted illicit accounts.
//!
//! The construction, in order:
//!
//! 1. Every node gets an activity weight `w ~ LogNormal(0, activity_sigma)`
//!    and owns `Poisson(mean_out_degree · w / mean(w))` transactions, so the
//!    expected edge count is `mean_out_degree · n`.
//! 2. A normal node's transaction is outgoing or incoming with equal odds and
//!    its counterparty is drawn proportionally to activity over all nodes.
//! 3. An illicit node's transaction is incoming with probability `in_skew`.
//!    With probability `camouflage` the counterparty is drawn exactly like a
//!    normal node's; otherwise it is a uniformly chosen other illicit
//!    account. Each illicit node is also given at least one outgoing and one
//!    incoming transaction with an activity-weighted normal counterparty.
//! 4. Amounts are `LogNormal(0, 1)`. Each illicit node's incoming amounts
//!    from normal senders are then rescaled so that its total received
//!    amount is `ratio` times its total sent amount. When the amounts it
//!    receives from other illicit nodes alone already exceed half that
//!    target, its payments to normal nodes are scaled up first.
//! 5. Timestamps are uniform integer ticks on `[0, 10^6)`; attribute columns
//!    beyond `[amount, timestamp]` are standard normal noise.
//!
//! Repeated counterparty draws produce parallel edges naturally. For small
//! dense graphs (`mean_out_degree >= 3`, `n <= 10 · mean_out_degree`) the
//! topology is redrawn until some pair has two parallel edges, and after 64
//! failed attempts one transaction is duplicated.
//!
//! With `camouflage = 1` both classes choose counterparties from the same
//! distribution, so neighborhood class composition carries no signal.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeRecord, LabelSet, Multigraph, NodeId};
use crate::ingest::{Dataset, EdgeSchema, NodeIdMap};
use crate::rng::{derive_seed, stream};

pub const TIMESTAMP_TICKS: u64 = 1_000_000;
const PARALLEL_RETRIES: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_illicit: usize,
    pub mean_out_degree: f64,
    /// Attribute width; the first two columns are amount and timestamp.
    pub attr_dim: usize,
    /// Target total received / total sent amount per illicit node.
    pub ratio: f64,
    /// Probability an illicit node's own transaction is incoming.
    pub in_skew: f64,
    /// Probability an illicit transaction uses a normal-looking counterparty.
    pub camouflage: f64,
    pub activity_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 4000,
            n_illicit: 1000,
            mean_out_degree: 6.0,
            attr_dim: 2,
            ratio: 3.0,
            in_skew: 0.6,
            camouflage: 0.3,
            activity_sigma: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("synthetic config: {m}")));
        if self.n_normal == 0 || self.n_illicit == 0 {
            return bad("node counts must be at least 1");
        }
        if self.n_illicit < 2 && self.camouflage < 1.0 {
            return bad("collusion edges need at least 2 illicit nodes (or camouflage = 1)");
        }
        if !(self.mean_out_degree.is_finite() && self.mean_out_degree > 0.0) {
            return bad("mean out-degree must be positive");
        }
        if self.attr_dim < 2 {
            return bad("attribute dimension must be at least 2 (amount, timestamp)");
        }
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return bad("ratio must be positive");
        }
        if !(0.0..=1.0).contains(&self.in_skew) {
            return bad("in-skew must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.camouflage) {
            return bad("camouflage must lie in [0, 1]");
        }
        if !(self.activity_sigma.is_finite() && self.activity_sigma >= 0.0) {
            return bad("activity sigma must be non-negative");
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n_normal + self.n_illicit
    }
}

/// Directed topology before amounts and times are attached.
struct Topology {
    illicit: Vec<bool>,
    edges: Vec<(NodeId, NodeId)>,
}

fn draw_other(rng: &mut ChaCha8Rng, dist: &WeightedIndex<f64>, pool: &[NodeId], not: NodeId) -> NodeId {
    loop {
        let u = pool[dist.sample(rng)];
        if u != not {
            return u;
        }
    }
}

fn topology(cfg: &SynthConfig, seed: u64) -> Result<Topology> {
    let n = cfg.node_count();
    let mut rng = stream(seed);
    let mut illicit = vec![false; n];
    let mut perm: Vec<NodeId> = (0..n).collect();
    perm.shuffle(&mut rng);
    for &v in &perm[..cfg.n_illicit] {
        illicit[v] = true;
    }
    let act = LogNormal::new(0.0, cfg.activity_sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let w: Vec<f64> = (0..n).map(|_| act.sample(&mut rng)).collect();
    let mean_w = w.iter().sum::<f64>() / n as f64;

    let all: Vec<NodeId> = (0..n).collect();
    let all_dist = WeightedIndex::new(&w).map_err(|e| Error::Internal(e.to_string()))?;
    let normals: Vec<NodeId> = (0..n).filter(|&v| !illicit[v]).collect();
    let normal_dist =
        WeightedIndex::new(normals.iter().map(|&v| w[v])).map_err(|e| Error::Internal(e.to_string()))?;
    let bad: Vec<NodeId> = (0..n).filter(|&v| illicit[v]).collect();

    let mut edges = Vec::with_capacity((cfg.mean_out_degree * n as f64 * 1.1) as usize);
    let push = |edges: &mut Vec<_>, v: NodeId, u: NodeId, incoming: bool| {
        edges.push(if incoming { (u, v) } else { (v, u) });
    };
    for v in 0..n {
        let lambda = cfg.mean_out_degree * w[v] / mean_w;
        let k = if lambda > 0.0 {
            Poisson::new(lambda).map_err(|e| Error::Internal(e.to_string()))?.sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..k {
            if !illicit[v] {
                let incoming = rng.random_bool(0.5);
                let u = draw_other(&mut rng, &all_dist, &all, v);
                push(&mut edges, v, u, incoming);
            } else {
                let incoming = rng.random_bool(cfg.in_skew);
                let u = if rng.random_bool(cfg.camouflage) {
                    draw_other(&mut rng, &all_dist, &all, v)
                } else {
                    loop {
                        let u = bad[rng.random_range(0..bad.len())];
                        if u != v {
                            break u;
                        }
                    }
                };
                push(&mut edges, v, u, incoming);
            }
        }
        if illicit[v] {
            for incoming in [false, true] {
                let u = draw_other(&mut rng, &normal_dist, &normals, v);
                push(&mut edges, v, u, incoming);
            }
        }
    }
    Ok(Topology { illicit, edges })
}

fn has_parallel(edges: &[(NodeId, NodeId)]) -> bool {
    let mut sorted = edges.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).any(|p| p[0] == p[1])
}

/// Generates a labeled graph; every node is labeled.
pub fn generate(cfg: &SynthConfig) -> Result<(Multigraph, LabelSet)> {
    cfg.validate()?;
    let n = cfg.node_count();
    let force_parallel = cfg.mean_out_degree >= 3.0 && n as f64 <= 10.0 * cfg.mean_out_degree;
    let mut topo = topology(cfg, derive_seed(cfg.seed, &["synth", "topology", "0"]))?;
    if force_parallel {
        let mut attempt = 1;
        while !has_parallel(&topo.edges) && attempt < PARALLEL_RETRIES {
            topo = topology(cfg, derive_seed(cfg.seed, &["synth", "topology", &attempt.to_string()]))?;
            attempt += 1;
        }
        if !has_parallel(&topo.edges) {
            let first = topo.edges[0];
            topo.edges.push(first);
        }
    }

    let mut rng = stream(derive_seed(cfg.seed, &["synth", "attributes"]));
    let amount = LogNormal::new(0.0, 1.0).map_err(|e| Error::Internal(e.to_string()))?;
    let mut amounts: Vec<f64> = topo.edges.iter().map(|_| amount.sample(&mut rng)).collect();
    calibrate(&topo, &mut amounts, cfg.ratio);

    let records = topo
        .edges
        .iter()
        .zip(&amounts)
        .map(|(&(s, d), &a)| {
            let t = rng.random_range(0..TIMESTAMP_TICKS) as f64;
            let mut attrs = vec![a, t];
            attrs.extend((2..cfg.attr_dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            EdgeRecord::new(s, d, t, attrs)
        })
        .collect();
    let graph = Multigraph::build(n, cfg.attr_dim, records)?;
    let labels = LabelSet::from_pairs(n, topo.illicit.iter().copied().enumerate())?;
    Ok((graph, labels))
}

/// Rescales amounts so each illicit node receives exactly `ratio` times what it sends.
fn calibrate(topo: &Topology, amounts: &mut [f64], ratio: f64) {
    let n = topo.illicit.len();
    let ill = &topo.illicit;
    // step 1: make sure normal-sourced inflow has room to fill the target
    let mut out_total = vec![0.0; n];
    let mut out_to_normal = vec![0.0; n];
    let mut in_from_illicit = vec![0.0; n];
    for (&(s, d), &a) in topo.edges.iter().zip(amounts.iter()) {
        out_total[s] += a;
        if !ill[d] {
            out_to_normal[s] += a;
        }
        if ill[s] {
            in_from_illicit[d] += a;
        }
    }
    let mut out_factor = vec![1.0; n];
    for v in (0..n).filter(|&v| ill[v]) {
        if ratio * out_total[v] < 2.0 * in_from_illicit[v] {
            let out_to_illicit = out_total[v] - out_to_normal[v];
            let want = 2.0 * in_from_illicit[v] / ratio - out_to_illicit;
            out_factor[v] = want / out_to_normal[v];
            out_total[v] = out_to_illicit + want;
        }
    }
    for (&(s, d), a) in topo.edges.iter().zip(amounts.iter_mut()) {
        if ill[s] && !ill[d] {
            *a *= out_factor[s];
        }
    }
    // step 2: fill the remaining inflow from normal senders
    let mut in_from_normal = vec![0.0; n];
    for (&(s, d), &a) in topo.edges.iter().zip(amounts.iter()) {
        if !ill[s] {
            in_from_normal[d] += a;
        }
    }
    for (&(s, d), a) in topo.edges.iter().zip(amounts.iter_mut()) {
        if ill[d] && !ill[s] {
            *a *= (ratio * out_total[d] - in_from_illicit[d]) / in_from_normal[d];
        }
    }
}

/// Writes `nodes.csv`, `edges.csv`, `labels.csv` into `dir`.
pub fn write(graph: &Multigraph, labels: &LabelSet, dir: &Path) -> Result<Vec<PathBuf>> {
    Dataset {
        graph: graph.clone(),
        labels: labels.clone(),
        ids: NodeIdMap::sequential(graph.node_count()),
        schema: EdgeSchema::Account,
    }
    .write(dir)
}
