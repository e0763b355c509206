//! Transaction-log and label ingestion, plus train/validation/test splitting.
//!
//! Two edge schemas are understood, detected from the CSV header:
//!
//! * account style: `src,dst,timestamp,amount[,extra_1..extra_k]`, one edge
//!   per row with attributes `[amount, timestamp, extra..]`;
//! * multi-input style: `tx_id,senders,receivers,timestamp[,extra_1..extra_k]`
//!   where `senders` and `receivers` are `addr:amount` lists joined by `|`.
//!   Each row expands to one edge per (sender, receiver) pair with attributes
//!   `[sent amount, received amount, timestamp, extra..]`.
//!
//! External string ids map to dense node ids in order of first appearance.
//! A dataset directory may carry a `nodes.csv` listing ids up front so that
//! isolated nodes and the id order survive a write/load cycle.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{EdgeRecord, LabelSet, Multigraph, NodeId};
use crate::rng::derive_seed;

pub const NODES_FILE: &str = "nodes.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSchema {
    /// `src,dst,timestamp,amount[,extra_*]`
    Account,
    /// `tx_id,senders,receivers,timestamp[,extra_*]`
    MultiInput,
}

impl EdgeSchema {
    fn detect(header: &csv::StringRecord, path: &Path) -> Result<(Self, usize)> {
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        let (schema, fixed) = if cols.starts_with(&["src", "dst", "timestamp", "amount"]) {
            (EdgeSchema::Account, 4)
        } else if cols.starts_with(&["tx_id", "senders", "receivers", "timestamp"]) {
            (EdgeSchema::MultiInput, 4)
        } else {
            return Err(parse_err(path, 1, format!("unrecognized edge header: {}", cols.join(","))));
        };
        for (i, c) in cols[fixed..].iter().enumerate() {
            if *c != format!("extra_{}", i + 1) {
                return Err(parse_err(path, 1, format!("expected column extra_{}, found {c}", i + 1)));
            }
        }
        Ok((schema, cols.len() - fixed))
    }

    /// Attribute width for a file with `extras` trailing columns.
    pub fn attr_dim(self, extras: usize) -> usize {
        match self {
            EdgeSchema::Account => 2 + extras,
            EdgeSchema::MultiInput => 3 + extras,
        }
    }
}

fn parse_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Bidirectional map between external string ids and dense node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeIdMap {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
}

impl NodeIdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity-style map whose names are the decimal node ids.
    pub fn sequential(n: usize) -> Self {
        let mut m = Self::new();
        for i in 0..n {
            m.intern(&i.to_string());
        }
        m
    }

    pub fn intern(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} '{field}'")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {what} '{field}'")));
    }
    Ok(v)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_err(path, line, e.to_string())
}

/// Loads a node list (`node` header) into `ids`.
pub fn load_nodes(path: &Path, ids: &mut NodeIdMap) -> Result<()> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0).map(str::trim) != Some("node") {
        return Err(parse_err(path, 1, "expected header 'node'"));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let name = rec.get(0).unwrap_or("");
        if name.is_empty() {
            return Err(parse_err(path, record_line(&rec), "empty node id"));
        }
        ids.intern(name);
    }
    Ok(())
}

/// Loads an edge file, detecting its schema from the header. Unknown string
/// ids get fresh dense ids in `ids`.
pub fn load_edges(path: &Path, ids: &mut NodeIdMap) -> Result<(Multigraph, EdgeSchema)> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let (schema, extras) = EdgeSchema::detect(&header, path)?;
    let width = header.len();
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let extra_vals = (0..extras)
            .map(|i| parse_f64(path, line, &rec[4 + i], "extra attribute"))
            .collect::<Result<Vec<_>>>()?;
        match schema {
            EdgeSchema::Account => {
                let (s, d) = (&rec[0], &rec[1]);
                if s.is_empty() || d.is_empty() {
                    return Err(parse_err(path, line, "empty node id"));
                }
                let ts = parse_f64(path, line, &rec[2], "timestamp")?;
                let amount = parse_f64(path, line, &rec[3], "amount")?;
                let src = ids.intern(s);
                let dst = ids.intern(d);
                let mut attrs = vec![amount, ts];
                attrs.extend_from_slice(&extra_vals);
                edges.push(EdgeRecord::new(src, dst, ts, attrs));
            }
            EdgeSchema::MultiInput => {
                let senders = parse_party_list(path, line, &rec[1])?;
                let receivers = parse_party_list(path, line, &rec[2])?;
                let ts = parse_f64(path, line, &rec[3], "timestamp")?;
                let senders: Vec<(NodeId, f64)> =
                    senders.into_iter().map(|(n, a)| (ids.intern(n), a)).collect();
                let receivers: Vec<(NodeId, f64)> =
                    receivers.into_iter().map(|(n, a)| (ids.intern(n), a)).collect();
                for &(src, sent) in &senders {
                    for &(dst, received) in &receivers {
                        let mut attrs = vec![sent, received, ts];
                        attrs.extend_from_slice(&extra_vals);
                        edges.push(EdgeRecord::new(src, dst, ts, attrs));
                    }
                }
            }
        }
    }
    let g = Multigraph::build(ids.len(), schema.attr_dim(extras), edges)?;
    Ok((g, schema))
}

fn parse_party_list<'a>(path: &Path, line: u64, field: &'a str) -> Result<Vec<(&'a str, f64)>> {
    if field.is_empty() {
        return Err(parse_err(path, line, "empty sender/receiver list"));
    }
    field
        .split('|')
        .map(|part| {
            let (name, amount) = part
                .rsplit_once(':')
                .ok_or_else(|| parse_err(path, line, format!("expected addr:amount, found '{part}'")))?;
            if name.is_empty() {
                return Err(parse_err(path, line, "empty address"));
            }
            Ok((name, parse_f64(path, line, amount, "amount")?))
        })
        .collect()
}

/// Loads `node,label` rows. Every node must already be known to `ids`.
pub fn load_labels(path: &Path, ids: &NodeIdMap) -> Result<LabelSet> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["node", "label"] {
        return Err(parse_err(path, 1, "expected header 'node,label'"));
    }
    let mut labels = LabelSet::new();
    let mut unknown = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected 2 fields"));
        }
        let y = match &rec[1] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("label must be 0 or 1, found '{other}'"))),
        };
        match ids.get(&rec[0]) {
            Some(v) => labels
                .insert(ids.len(), v, y)
                .map_err(|e| parse_err(path, line, e.to_string()))?,
            None => unknown.push(rec[0].to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Label(format!("unknown node ids in {}: {}", path.display(), unknown.join(", "))));
    }
    Ok(labels)
}

/// A graph with its id map and (possibly empty) label set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Multigraph,
    pub labels: LabelSet,
    pub ids: NodeIdMap,
    pub schema: EdgeSchema,
}

impl Dataset {
    /// Loads `nodes.csv` (optional), `edges.csv` and `labels.csv` (optional)
    /// from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut ids = NodeIdMap::new();
        let nodes = dir.join(NODES_FILE);
        if nodes.exists() {
            load_nodes(&nodes, &mut ids)?;
        }
        let (graph, schema) = load_edges(&dir.join(EDGES_FILE), &mut ids)?;
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() {
            load_labels(&labels_path, &ids)?
        } else {
            LabelSet::new()
        };
        Ok(Self {
            graph,
            labels,
            ids,
            schema,
        })
    }

    /// Writes the three dataset files into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nodes = dir.join(NODES_FILE);
        let edges = dir.join(EDGES_FILE);
        let labels = dir.join(LABELS_FILE);
        write_nodes(&nodes, &self.ids)?;
        write_edges(&edges, &self.graph, &self.ids, self.schema)?;
        write_labels(&labels, &self.labels, &self.ids)?;
        Ok(vec![nodes, edges, labels])
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    Ok(std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_nodes(path: &Path, ids: &NodeIdMap) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "node").map_err(io)?;
    for i in 0..ids.len() {
        writeln!(w, "{}", ids.name(i)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes edges in `schema`. The account schema requires attribute layout
/// `[amount, timestamp, extra..]`; the multi-input schema writes one row per edge.
pub fn write_edges(path: &Path, g: &Multigraph, ids: &NodeIdMap, schema: EdgeSchema) -> Result<()> {
    let d = g.attr_dim();
    let fixed = match schema {
        EdgeSchema::Account => 2,
        EdgeSchema::MultiInput => 3,
    };
    if d < fixed {
        return Err(Error::Argument(format!("attribute dimension {d} too small for {schema:?} schema")));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let extras: String = (1..=d - fixed).map(|i| format!(",extra_{i}")).collect();
    match schema {
        EdgeSchema::Account => writeln!(w, "src,dst,timestamp,amount{extras}"),
        EdgeSchema::MultiInput => writeln!(w, "tx_id,senders,receivers,timestamp{extras}"),
    }
    .map_err(io)?;
    for (eid, e) in g.edges().iter().enumerate() {
        let tail: String = e.attrs[fixed..].iter().map(|a| format!(",{a}")).collect();
        match schema {
            EdgeSchema::Account => {
                if e.attrs[1] != e.timestamp {
                    return Err(Error::Argument(format!(
                        "edge {eid}: attribute 1 must equal the timestamp for the account schema"
                    )));
                }
                writeln!(w, "{},{},{},{}{tail}", ids.name(e.src), ids.name(e.dst), e.timestamp, e.attrs[0])
            }
            EdgeSchema::MultiInput => {
                if e.attrs[2] != e.timestamp {
                    return Err(Error::Argument(format!(
                        "edge {eid}: attribute 2 must equal the timestamp for the multi-input schema"
                    )));
                }
                writeln!(
                    w,
                    "{eid},{}:{},{}:{},{}{tail}",
                    ids.name(e.src),
                    e.attrs[0],
                    ids.name(e.dst),
                    e.attrs[1],
                    e.timestamp
                )
            }
        }
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_labels(path: &Path, labels: &LabelSet, ids: &NodeIdMap) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "node,label").map_err(io)?;
    for (v, y) in labels.iter() {
        writeln!(w, "{},{}", ids.name(v), y as u8).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" | "validation" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Argument(format!("unknown split '{other}'"))),
        }
    }
}

/// Disjoint train/validation/test node sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn get(&self, kind: SplitKind) -> &[NodeId] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn write(&self, path: &Path, ids: &NodeIdMap) -> Result<()> {
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        writeln!(w, "node,split").map_err(io)?;
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            for &v in self.get(kind) {
                writeln!(w, "{},{}", ids.name(v), kind.as_str()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path, ids: &NodeIdMap) -> Result<Self> {
        let mut rdr = open_csv(path)?;
        let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["node", "split"] {
            return Err(parse_err(path, 1, "expected header 'node,split'"));
        }
        let mut out = SplitAssignment {
            train: vec![],
            val: vec![],
            test: vec![],
            seed: 0,
        };
        let mut seen = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = record_line(&rec);
            let v = ids
                .get(&rec[0])
                .ok_or_else(|| parse_err(path, line, format!("unknown node '{}'", &rec[0])))?;
            if !seen.insert(v) {
                return Err(parse_err(path, line, format!("node '{}' assigned twice", &rec[0])));
            }
            let kind: SplitKind = rec[1].parse().map_err(|e: Error| parse_err(path, line, e.to_string()))?;
            match kind {
                SplitKind::Train => out.train.push(v),
                SplitKind::Val => out.val.push(v),
                SplitKind::Test => out.test.push(v),
            }
        }
        out.train.sort_unstable();
        out.val.sort_unstable();
        out.test.sort_unstable();
        Ok(out)
    }
}

/// Stratified 2:1:1 split. Each class is shuffled independently; validation
/// and test take `n / 4` nodes each and the remainder goes to training.
pub fn split(labels: &LabelSet, seed: u64) -> Result<SplitAssignment> {
    let mut out = SplitAssignment {
        train: vec![],
        val: vec![],
        test: vec![],
        seed,
    };
    for class in [false, true] {
        let mut members: Vec<NodeId> = labels.iter().filter(|&(_, y)| y == class).map(|(v, _)| v).collect();
        if members.is_empty() {
            return Err(Error::Split(format!(
                "class {} has no labeled nodes",
                if class { "illicit" } else { "normal" }
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split", if class { "1" } else { "0" }]));
        members.shuffle(&mut rng);
        let quarter = members.len() / 4;
        out.val.extend_from_slice(&members[..quarter]);
        out.test.extend_from_slice(&members[quarter..2 * quarter]);
        out.train.extend_from_slice(&members[2 * quarter..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Downsamples the illicit training nodes so their share of the training set
/// is approximately `ratio`. Validation and test are untouched.
pub fn subsample_illicit(
    assignment: &SplitAssignment,
    labels: &LabelSet,
    ratio: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    let (mut illicit, normal): (Vec<NodeId>, Vec<NodeId>) =
        assignment.train.iter().partition(|&&v| labels.get(v) == Some(true));
    let k = illicit.len();
    let n = normal.len();
    let current = k as f64 / (k + n).max(1) as f64;
    if !(ratio > 0.0 && ratio < 1.0) || ratio > current + 1e-12 {
        return Err(Error::Split(format!(
            "illicit ratio {ratio} infeasible (current training fraction {current:.6})"
        )));
    }
    // k' / (k' + n) = ratio
    let keep = ((ratio * n as f64 / (1.0 - ratio)).round() as usize).clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["subsample"]));
    illicit.shuffle(&mut rng);
    illicit.truncate(keep);
    let mut train: Vec<NodeId> = normal.into_iter().chain(illicit).collect();
    train.sort_unstable();
    Ok(SplitAssignment {
        train,
        ..assignment.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn labels(illicit: usize, normal: usize) -> LabelSet {
        let n = illicit + normal;
        LabelSet::from_pairs(n, (0..n).map(|v| (v, v < illicit))).unwrap()
    }

    #[test]
    fn multi_input_row_expands_to_all_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "e.csv",
            "tx_id,senders,receivers,timestamp,extra_1\nt1,a:1.5|b:2,c:1|d:1|e:1.5,100,0.1\n",
        );
        let mut ids = NodeIdMap::new();
        let (g, schema) = load_edges(&p, &mut ids).unwrap();
        assert_eq!(schema, EdgeSchema::MultiInput);
        assert_eq!(g.edge_count(), 6);
        assert_eq!(g.attr_dim(), 4);
        assert_eq!(g.edge(0).attrs, vec![1.5, 1.0, 100.0, 0.1]);
        assert_eq!(g.edge(5).attrs, vec![2.0, 1.5, 100.0, 0.1]);
        assert_eq!(ids.name(g.edge(5).src), "b");
        assert_eq!(ids.name(g.edge(5).dst), "e");
    }

    #[test]
    fn account_row_gives_two_attributes() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "e.csv", "src,dst,timestamp,amount\n0xa,0xb,17,3.25\n");
        let mut ids = NodeIdMap::new();
        let (g, schema) = load_edges(&p, &mut ids).unwrap();
        assert_eq!(schema, EdgeSchema::Account);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.attr_dim(), 2);
        assert_eq!(g.edge(0).attrs, vec![3.25, 17.0]);
        assert_eq!(g.edge(0).timestamp, 17.0);
    }

    #[test]
    fn header_only_gives_empty_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "e.csv", "src,dst,timestamp,amount\n");
        let (g, _) = load_edges(&p, &mut NodeIdMap::new()).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (0, 0));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "e.csv", "src,dst,timestamp,amount\na,b,1,2\na,b,x,2\n");
        match load_edges(&p, &mut NodeIdMap::new()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_file_rules() {
        let dir = tempfile::tempdir().unwrap();
        let ids = NodeIdMap::sequential(8);
        let body: String = (0..8).map(|i| format!("{i},{}\n", (i < 3) as u8)).collect();
        let p = write_file(dir.path(), "l.csv", &format!("node,label\n{body}"));
        let l = load_labels(&p, &ids).unwrap();
        assert_eq!((l.len(), l.count_illicit(), l.count_normal()), (8, 3, 5));

        let p = write_file(dir.path(), "dup.csv", "node,label\n1,1\n1,1\n");
        assert_eq!(load_labels(&p, &ids).unwrap().len(), 1);
        let p = write_file(dir.path(), "conf.csv", "node,label\n1,1\n1,0\n");
        assert!(load_labels(&p, &ids).is_err());
        let p = write_file(dir.path(), "bad.csv", "node,label\n1,2\n");
        assert!(matches!(load_labels(&p, &ids), Err(Error::Parse { line: 2, .. })));
        let p = write_file(dir.path(), "unk.csv", "node,label\nzz,1\nyy,0\n");
        let msg = load_labels(&p, &ids).unwrap_err().to_string();
        assert!(msg.contains("zz") && msg.contains("yy"), "{msg}");
    }

    #[test]
    fn split_exact_division() {
        let s = split(&labels(8, 8), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 4, 4));
        let l = labels(8, 8);
        let count = |xs: &[NodeId]| xs.iter().filter(|&&v| l.get(v) == Some(true)).count();
        assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (4, 2, 2));
    }

    #[test]
    fn split_remainder_to_train_and_deterministic() {
        let l = labels(5, 8);
        let a = split(&l, 11).unwrap();
        assert_eq!(a, split(&l, 11).unwrap());
        let count = |xs: &[NodeId]| xs.iter().filter(|&&v| l.get(v) == Some(true)).count();
        assert_eq!((count(&a.train), count(&a.val), count(&a.test)), (3, 1, 1));
    }

    #[test]
    fn split_requires_both_classes() {
        assert!(matches!(split(&labels(0, 5), 1), Err(Error::Split(_))));
    }

    #[test]
    fn subsample_to_one_percent() {
        let l = labels(100, 100);
        // put everything in train to exercise the ratio arithmetic
        let a = SplitAssignment {
            train: (0..200).collect(),
            val: vec![],
            test: vec![],
            seed: 0,
        };
        let s = subsample_illicit(&a, &l, 0.01, 5).unwrap();
        let k = s.train.iter().filter(|&&v| l.get(v) == Some(true)).count();
        assert_eq!(k, 1);
        assert_eq!(s.train.len(), 101);
        assert_eq!(s, subsample_illicit(&a, &l, 0.01, 5).unwrap());
        // current fraction leaves it unchanged
        assert_eq!(subsample_illicit(&a, &l, 0.5, 5).unwrap(), a);
        assert!(subsample_illicit(&a, &l, 0.6, 5).is_err());
        assert!(subsample_illicit(&a, &l, 0.0, 5).is_err());
    }

    #[test]
    fn stratified_ratio_within_five_points() {
        let l = labels(60, 240);
        let s = split(&l, 9).unwrap();
        let global = 60.0 / 300.0;
        for part in [&s.train, &s.val, &s.test] {
            let f = part.iter().filter(|&&v| l.get(v) == Some(true)).count() as f64 / part.len() as f64;
            assert!((f - global).abs() < 0.05);
        }
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids = NodeIdMap::sequential(16);
        let s = split(&labels(8, 8), 1).unwrap();
        let p = dir.path().join("split.csv");
        s.write(&p, &ids).unwrap();
        let back = SplitAssignment::load(&p, &ids).unwrap();
        assert_eq!((back.train, back.val, back.test), (s.train, s.val, s.test));
    }
}
