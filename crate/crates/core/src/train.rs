//! Mini-batch training with Adam and validation-F1 checkpoint selection,
//! plus checkpoint persistence and inference.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ColumnStats, LabelSet, Multigraph, NodeId};
use crate::ingest::SplitAssignment;
use crate::metrics::{evaluate, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{
    bce_loss, edge2seq_batch, forward, forward_with, Ablation, Encoding, ForwardOptions, ModelDims, ModelParams,
};
use crate::rng::{derive_coords, derive_seed, stream};
use crate::sampler::{batches, sample_block, Block};
use crate::seqgen::{EdgeSequences, SequenceCache};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const HISTORY_HEADER: &str = "epoch,loss,val_precision,val_recall,val_f1,val_auc,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Representation width `c`.
    pub hidden: usize,
    /// Number of MGD layers `L`.
    pub layers: usize,
    pub t_max: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// One fan-out per layer, nearest hop first.
    pub fanouts: Vec<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub standardize: bool,
    /// Evaluate with every neighbor instead of the training fan-outs.
    pub full_neighborhood: bool,
    /// Threads used for evaluation batches.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            t_max: 32,
            learning_rate: 1e-3,
            dropout: 0.2,
            batch_size: 128,
            epochs: 30,
            fanouts: vec![25, 10],
            seed: 0,
            ablation: Ablation::None,
            standardize: true,
            full_neighborhood: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden width {} must be even and positive", self.hidden));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.fanouts.len() != self.layers {
            return bad(format!(
                "{} fan-outs given for {} layers",
                self.fanouts.len(),
                self.layers
            ));
        }
        if self.fanouts.contains(&0) {
            return bad("fan-outs must be at least 1".into());
        }
        Ok(())
    }

    /// Layers actually instantiated (none under the no-MGD ablation).
    pub fn active_layers(&self) -> usize {
        if self.ablation == Ablation::NoMgd {
            0
        } else {
            self.layers
        }
    }

    pub fn dims(&self, attr_dim: usize) -> Result<ModelDims> {
        ModelDims::new(self.hidden, attr_dim, self.active_layers())
    }

    fn train_fanouts(&self) -> Vec<usize> {
        self.fanouts[..self.active_layers()].to_vec()
    }
}

/// Xavier-uniform weights, zero biases. Every block has its own derived stream.
pub fn xavier_init(dims: ModelDims, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(dims);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(p.values_mut()) {
        if t.rank() != 2 {
            continue;
        }
        let (fan_out, fan_in) = (t.rows(), t.cols());
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = stream(derive_seed(seed, &["init", name]));
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..=bound));
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads` follow [`ModelParams::named`] order.
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let targets = params.values_mut();
    if grads.len() != targets.len() || state.m.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} gradients for {} parameter blocks",
            grads.len(),
            targets.len()
        )));
    }
    for (g, p) in grads.iter().zip(&targets) {
        if g.shape() != p.shape() {
            return Err(Error::Argument(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NumericalFault { op: "adam_step" });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in targets.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Graph with attributes ready for the model, plus its sequence cache.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: Multigraph,
    pub cache: SequenceCache,
    pub stats: Option<ColumnStats>,
}

impl Prepared {
    /// Standardizes (computing statistics over all edges unless given) and
    /// builds the sequences.
    pub fn new(graph: &Multigraph, t_max: usize, standardize: bool, stats: Option<&ColumnStats>) -> Result<Self> {
        let (graph, stats) = match (standardize, stats) {
            (false, _) => (graph.clone(), None),
            (true, Some(s)) => {
                if s.mean.len() != graph.attr_dim() {
                    return Err(Error::Checkpoint(format!(
                        "standardization covers {} columns but the graph has {}",
                        s.mean.len(),
                        graph.attr_dim()
                    )));
                }
                let edges = graph
                    .edges()
                    .iter()
                    .map(|e| {
                        let mut e = e.clone();
                        s.apply(&mut e.attrs);
                        e
                    })
                    .collect();
                (Multigraph::build(graph.node_count(), graph.attr_dim(), edges)?, Some(s.clone()))
            }
            (true, None) => {
                let (g, s) = graph.standardized();
                (g, Some(s))
            }
        };
        let cache = SequenceCache::new(&graph, t_max)?;
        Ok(Self { graph, cache, stats })
    }
}

fn eval_fanouts(cfg: &TrainConfig, g: &Multigraph) -> Vec<usize> {
    if cfg.full_neighborhood {
        vec![g.max_degree().max(1); cfg.active_layers()]
    } else {
        cfg.train_fanouts()
    }
}

/// Dropout-free probabilities for `nodes`, in order.
///
/// Neighborhood sampling is keyed by node, so a node's score does not depend
/// on which batch it lands in or how many workers run.
pub fn infer(
    params: &ModelParams,
    prepared: &Prepared,
    nodes: &[NodeId],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let dims = params.dims();
    let fanouts = eval_fanouts(cfg, &prepared.graph);
    let seed = derive_seed(cfg.seed, &["eval"]);
    let opts = ForwardOptions::eval(cfg.ablation);
    // Encodings carry no randomness at inference, so every node is encoded
    // once and shared by all batches.
    let blocks: Vec<Block> = nodes
        .chunks(cfg.batch_size)
        .map(|chunk| sample_block(&prepared.graph, chunk, &fanouts, seed))
        .collect::<Result<_>>()?;
    let mut needed: Vec<NodeId> = blocks.iter().flat_map(|b| b.depth_sets[dims.layers].iter().copied()).collect();
    needed.sort_unstable();
    needed.dedup();
    let encoded = {
        let mut tape = Tape::new();
        let bound = params.bind_constant(&mut tape)?;
        let seqs: Vec<&EdgeSequences> = needed.iter().map(|&v| prepared.cache.get(v)).collect();
        let h = edge2seq_batch(&mut tape, &seqs, &bound, dims)?;
        tape.value(h).clone()
    };
    let run = |block: &Block| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_constant(&mut tape)?;
        let h = tape.constant(encoded.clone())?;
        let enc = Encoding::Precomputed { nodes: &needed, h };
        let out = forward_with(&mut tape, block, enc, &bound, dims, &opts)?;
        Ok(tape.value(out.probs).data().to_vec())
    };
    let parts: Vec<Vec<f64>> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Internal(e.to_string()))?;
        pool.install(|| blocks.par_iter().map(run).collect::<Result<_>>())?
    } else {
        blocks.iter().map(run).collect::<Result<_>>()?
    };
    Ok(parts.concat())
}

fn labels_for(labels: &LabelSet, nodes: &[NodeId]) -> Result<Vec<bool>> {
    nodes
        .iter()
        .map(|&v| {
            labels
                .get(v)
                .ok_or_else(|| Error::Split(format!("node {v} is in a split but has no label")))
        })
        .collect()
}

/// Scores `nodes` against their labels.
pub fn evaluate_nodes(
    params: &ModelParams,
    prepared: &Prepared,
    labels: &LabelSet,
    nodes: &[NodeId],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let y = labels_for(labels, nodes)?;
    let p = infer(params, prepared, nodes, cfg)?;
    evaluate(&p, &y, DEFAULT_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-node loss over the epoch.
    pub loss: f64,
    pub val: EvalReport,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.loss,
            self.val.precision,
            self.val.recall,
            self.val.f1,
            self.val.auc.map(|a| a.to_string()).unwrap_or_default(),
            self.seconds
        )
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trained parameters with everything needed to reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_f1: f64,
    pub stats: Option<ColumnStats>,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    version: u32,
    config: TrainConfig,
    attr_dim: usize,
    epoch: usize,
    val_f1: f64,
    standardization: Option<ColumnStats>,
    params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let stored = StoredCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            attr_dim: self.params.dims().attr_dim,
            epoch: self.epoch,
            val_f1: self.val_f1,
            standardization: self.stats.clone(),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&stored).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if stored.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", stored.version)));
        }
        stored.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let dims = stored
            .config
            .dims(stored.attr_dim)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ModelParams::zeros(dims);
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != stored.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                stored.params.len()
            )));
        }
        for (((name, shape), slot), s) in expected.iter().zip(params.values_mut()).zip(stored.params) {
            if *name != s.name {
                return Err(Error::Checkpoint(format!("expected block {name}, found {}", s.name)));
            }
            if *shape != s.shape || s.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {shape:?}, found {:?} with {} values",
                    s.shape,
                    s.values.len()
                )));
            }
            *slot = Tensor::new(shape, s.values).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if !slot.is_finite() {
                return Err(Error::Checkpoint(format!("block {name} holds non-finite values")));
            }
        }
        if let Some(s) = &stored.standardization {
            if s.mean.len() != stored.attr_dim || s.std.len() != stored.attr_dim {
                return Err(Error::Checkpoint("standardization width does not match attributes".into()));
            }
        }
        Ok(Self {
            config: stored.config,
            epoch: stored.epoch,
            val_f1: stored.val_f1,
            stats: stored.standardization,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("json.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Prepares `graph` exactly as it was prepared for training.
    pub fn prepare(&self, graph: &Multigraph) -> Result<Prepared> {
        let want = self.params.dims().attr_dim;
        if graph.attr_dim() != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {want} edge attributes, graph has {}",
                graph.attr_dim()
            )));
        }
        Prepared::new(graph, self.config.t_max, self.stats.is_some(), self.stats.as_ref())
    }
}

/// Dropout-free probabilities for `nodes` under a checkpoint.
pub fn predict(ckpt: &Checkpoint, graph: &Multigraph, nodes: &[NodeId]) -> Result<Vec<f64>> {
    for &v in nodes {
        if v >= graph.node_count() {
            return Err(Error::Argument(format!("node {v} out of range")));
        }
    }
    let prepared = ckpt.prepare(graph)?;
    infer(&ckpt.params, &prepared, nodes, &ckpt.config)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest validation F1; the earliest epoch wins ties.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub prepared: Prepared,
}

/// Runs the epoch loop. `on_epoch` sees every record and, when validation F1
/// improved, the new best checkpoint; it runs before the next epoch starts, so
/// a later numerical fault leaves whatever it persisted intact.
pub fn train(
    cfg: &TrainConfig,
    graph: &Multigraph,
    labels: &LabelSet,
    split: &SplitAssignment,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Checkpoint>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Split("training and validation splits must be non-empty".into()));
    }
    let train_y = labels_for(labels, &split.train)?;
    let label_of: std::collections::HashMap<NodeId, bool> =
        split.train.iter().copied().zip(train_y.iter().copied()).collect();
    labels_for(labels, &split.val)?;

    let prepared = Prepared::new(graph, cfg.t_max, cfg.standardize, None)?;
    let dims = cfg.dims(graph.attr_dim())?;
    let mut params = xavier_init(dims, cfg.seed);
    let mut adam = AdamState::new(&params);
    let fanouts = cfg.train_fanouts();
    let sample_seed = derive_seed(cfg.seed, &["sample"]);
    let dropout_seed = derive_seed(cfg.seed, &["dropout"]);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let order = batches(&split.train, cfg.batch_size, derive_coords(cfg.seed, &[epoch as u64]))?;
        for (bi, batch) in order.iter().enumerate() {
            let coords = [epoch as u64, bi as u64];
            let block = sample_block(&prepared.graph, batch, &fanouts, derive_coords(sample_seed, &coords))?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape)?;
            let opts = ForwardOptions {
                ablation: cfg.ablation,
                dropout: cfg.dropout,
                dropout_seed: (cfg.dropout > 0.0).then(|| derive_coords(dropout_seed, &coords)),
            };
            let out = forward(&mut tape, &block, &prepared.cache, &bound, dims, &opts)?;
            let y: Vec<bool> = batch.iter().map(|v| label_of[v]).collect();
            let loss = bce_loss(&mut tape, out.probs, &y)?;
            total += tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = bound.named().into_iter().map(|(_, &v)| grads.get(v)).collect();
            adam_step(&mut params, &g, &mut adam, cfg.learning_rate)?;
        }
        let val = evaluate_nodes(&params, &prepared, labels, &split.val, cfg)?;
        let record = EpochRecord {
            epoch,
            loss: total / split.train.len() as f64,
            val,
            seconds: start.elapsed().as_secs_f64(),
        };
        let improved = best.as_ref().is_none_or(|b| val.f1 > b.val_f1);
        if improved {
            best = Some(Checkpoint {
                config: cfg.clone(),
                epoch,
                val_f1: val.f1,
                stats: prepared.stats.clone(),
                params: params.clone(),
            });
        }
        on_epoch(&record, improved.then_some(best.as_ref()).flatten())?;
        history.push(record);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        history,
        prepared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::split;
    use crate::synth::{generate, SynthConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            t_max: 4,
            batch_size: 8,
            epochs: 2,
            fanouts: vec![4, 3],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (Multigraph, LabelSet, SplitAssignment) {
        let (g, l) = generate(&SynthConfig {
            n_normal: 16,
            n_illicit: 8,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = split(&l, 1).unwrap();
        (g, l, s)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { hidden: 7, ..TrainConfig::default() },
            TrainConfig { fanouts: vec![5], ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let dims = ModelDims::new(128, 2, 2).unwrap();
        let p = xavier_init(dims, 9);
        assert_eq!(p, xavier_init(dims, 9));
        for (name, t) in p.named() {
            if t.rank() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bound = (6.0f64 / 256.0).sqrt();
        let max = p.layers[0].w2.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= bound && max > 0.9 * bound);
        let qb = (6.0f64 / 129.0).sqrt();
        let qmax = p.layers[0].q.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(qmax <= qb && qmax > 0.5 * qb);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let dims = ModelDims::new(4, 2, 1).unwrap();
        let mut p = xavier_init(dims, 1);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros: Vec<Tensor> = p.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &zeros, &mut st, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        let mut p = before.clone();
        let mut st = AdamState::new(&p);
        let g: Vec<Tensor> = p
            .named()
            .iter()
            .map(|(_, t)| Tensor::new(t.shape(), vec![0.5; t.numel()]).unwrap())
            .collect();
        adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        for ((_, a), (_, b)) in p.named().iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let want = 0.01 * 0.5 / (0.5 + 1e-8);
                assert!(((y - x) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_non_finite_gradient_faults_without_update() {
        let dims = ModelDims::new(4, 2, 0).unwrap();
        let mut p = xavier_init(dims, 1);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let mut g: Vec<Tensor> = p.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        g[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut st, 0.01).unwrap_err();
        assert!(err.is_numerical_fault());
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn one_epoch_history_and_reproducibility() {
        let (g, l, s) = tiny_data();
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let a = train(&cfg, &g, &l, &s, |_, _| Ok(())).unwrap();
        assert_eq!(a.history.len(), 1);
        let b = train(&cfg, &g, &l, &s, |_, _| Ok(())).unwrap();
        assert_eq!(a.history[0].loss.to_bits(), b.history[0].loss.to_bits());
        assert_eq!(a.best.params, b.best.params);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_checks() {
        let (g, l, s) = tiny_data();
        let out = train(&tiny_cfg(), &g, &l, &s, |_, _| Ok(())).unwrap();
        let json = out.best.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back, out.best);

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["params"][0]["shape"] = serde_json::json!([3, 3]);
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
        assert!(Checkpoint::from_json("{not json").is_err());
    }

    #[test]
    fn predictions_are_probabilities_and_batch_independent() {
        let (g, l, s) = tiny_data();
        let out = train(&tiny_cfg(), &g, &l, &s, |_, _| Ok(())).unwrap();
        let nodes: Vec<NodeId> = (0..g.node_count()).collect();
        let p = predict(&out.best, &g, &nodes).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        let twice = predict(&out.best, &g, &[5, 5, 0]).unwrap();
        assert_eq!(twice[0], twice[1]);
        assert_eq!(twice[0], p[5]);
        let mut par = out.best.clone();
        par.config.workers = 3;
        par.config.batch_size = 5;
        assert_eq!(predict(&par, &g, &nodes).unwrap(), p);
    }

    #[test]
    fn best_checkpoint_is_max_validation_f1() {
        let (g, l, s) = tiny_data();
        let cfg = TrainConfig { epochs: 4, ..tiny_cfg() };
        let mut saved = Vec::new();
        let out = train(&cfg, &g, &l, &s, |r, c| {
            if let Some(c) = c {
                saved.push((r.epoch, c.val_f1));
            }
            Ok(())
        })
        .unwrap();
        let best = out.history.iter().map(|r| r.val.f1).fold(f64::MIN, f64::max);
        let first_best = out.history.iter().find(|r| r.val.f1 == best).unwrap().epoch;
        assert_eq!(out.best.epoch, first_best);
        assert_eq!(saved.last().unwrap().0, first_best);
    }
}
