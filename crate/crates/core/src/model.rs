//! The detection network.
//!
//! * Edge2Seq: each direction's attribute sequence is linearly projected,
//!   run through its own GRU from a zero state and max-pooled over time;
//!   the node representation is `h_out ‖ h_in`.
//! * MGD layers: `z = W2·h + b2`; every sampled in-neighbor `u` sends
//!   `W3·(z_u ‖ (z_v − z_u))` and the messages are summed (multiset sum, so
//!   parallel edges count once each) into `r_in`, likewise `r_out`; the
//!   three parts are mixed by a softmax over `LeakyReLU(⟨·, q⟩)` scores.
//! * Classifier: `sigmoid(W_b·ReLU(W_a·h + b_a) + b_b)`.
//!
//! Everything is computed in batch on a [`Tape`]: a block's sequences are
//! packed by descending length so every GRU step is one matmul over the
//! still-running sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Direction, NodeId};
use crate::rng::stream;
use crate::sampler::{Block, SampledEdge};
use crate::seqgen::{EdgeSequences, SequenceCache};
use crate::tensor::{Tape, Tensor, Var, LEAKY_RELU_SLOPE};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Attention weights fixed to 1.
    NoAttention,
    /// No message-passing layers; classify the sequence encoding directly.
    NoMgd,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no_attention" => Ok(Ablation::NoAttention),
            "no_mgd" => Ok(Ablation::NoMgd),
            other => Err(Error::Argument(format!("unknown ablation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoAttention => "no_attention",
            Ablation::NoMgd => "no_mgd",
        })
    }
}

/// Shape-determining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Representation width `c` (even; each direction gets `c / 2`).
    pub hidden: usize,
    /// Edge attribute width `d`.
    pub attr_dim: usize,
    /// Number of MGD layers.
    pub layers: usize,
}

impl ModelDims {
    pub fn new(hidden: usize, attr_dim: usize, layers: usize) -> Result<Self> {
        if hidden == 0 || !hidden.is_multiple_of(2) {
            return Err(Error::Argument(format!("representation width {hidden} must be even and positive")));
        }
        if attr_dim == 0 {
            return Err(Error::Argument("attribute dimension must be positive".into()));
        }
        Ok(Self {
            hidden,
            attr_dim,
            layers,
        })
    }

    pub fn half(&self) -> usize {
        self.hidden / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub w_r: T,
    pub w_u: T,
    pub w_n: T,
    pub u_r: T,
    pub u_u: T,
    pub u_n: T,
    pub b_r: T,
    pub b_u: T,
    pub b_n: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mgd<T> {
    pub w2: T,
    pub b2: T,
    pub w3: T,
    pub q: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Every learnable block, generic over storage (tensors, or tape vars once bound).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTree<T> {
    pub proj_out: Linear<T>,
    pub proj_in: Linear<T>,
    pub gru_out: Gru<T>,
    pub gru_in: Gru<T>,
    pub layers: Vec<Mgd<T>>,
    pub classifier: Classifier<T>,
}

pub type ModelParams = ParamTree<Tensor>;

impl<T> ParamTree<T> {
    /// `(name, value)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (dir, lin, gru) in [("out", &self.proj_out, &self.gru_out), ("in", &self.proj_in, &self.gru_in)] {
            out.push((format!("proj_{dir}.w"), &lin.w));
            out.push((format!("proj_{dir}.b"), &lin.b));
            for (n, t) in [
                ("w_r", &gru.w_r),
                ("w_u", &gru.w_u),
                ("w_n", &gru.w_n),
                ("u_r", &gru.u_r),
                ("u_u", &gru.u_u),
                ("u_n", &gru.u_n),
                ("b_r", &gru.b_r),
                ("b_u", &gru.b_u),
                ("b_n", &gru.b_n),
            ] {
                out.push((format!("gru_{dir}.{n}"), t));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let i = i + 1;
            out.push((format!("mgd{i}.w2"), &l.w2));
            out.push((format!("mgd{i}.b2"), &l.b2));
            out.push((format!("mgd{i}.w3"), &l.w3));
            out.push((format!("mgd{i}.q"), &l.q));
        }
        let c = &self.classifier;
        out.push(("classifier.w1".into(), &c.w1));
        out.push(("classifier.b1".into(), &c.b1));
        out.push(("classifier.w2".into(), &c.w2));
        out.push(("classifier.b2".into(), &c.b2));
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for (lin, gru) in [(&mut self.proj_out, &mut self.gru_out), (&mut self.proj_in, &mut self.gru_in)] {
            out.push(&mut lin.w);
            out.push(&mut lin.b);
            out.extend([
                &mut gru.w_r,
                &mut gru.w_u,
                &mut gru.w_n,
                &mut gru.u_r,
                &mut gru.u_u,
                &mut gru.u_n,
                &mut gru.b_r,
                &mut gru.b_u,
                &mut gru.b_n,
            ]);
        }
        for l in &mut self.layers {
            out.extend([&mut l.w2, &mut l.b2, &mut l.w3, &mut l.q]);
        }
        let c = &mut self.classifier;
        out.extend([&mut c.w1, &mut c.b1, &mut c.w2, &mut c.b2]);
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<ParamTree<U>> {
        let mut lin = |l: &Linear<T>| -> Result<Linear<U>> { Ok(Linear { w: f(&l.w)?, b: f(&l.b)? }) };
        let proj_out = lin(&self.proj_out)?;
        let proj_in = lin(&self.proj_in)?;
        let mut gru = |g: &Gru<T>| -> Result<Gru<U>> {
            Ok(Gru {
                w_r: f(&g.w_r)?,
                w_u: f(&g.w_u)?,
                w_n: f(&g.w_n)?,
                u_r: f(&g.u_r)?,
                u_u: f(&g.u_u)?,
                u_n: f(&g.u_n)?,
                b_r: f(&g.b_r)?,
                b_u: f(&g.b_u)?,
                b_n: f(&g.b_n)?,
            })
        };
        let gru_out = gru(&self.gru_out)?;
        let gru_in = gru(&self.gru_in)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Mgd {
                    w2: f(&l.w2)?,
                    b2: f(&l.b2)?,
                    w3: f(&l.w3)?,
                    q: f(&l.q)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let c = &self.classifier;
        let classifier = Classifier {
            w1: f(&c.w1)?,
            b1: f(&c.b1)?,
            w2: f(&c.w2)?,
            b2: f(&c.b2)?,
        };
        Ok(ParamTree {
            proj_out,
            proj_in,
            gru_out,
            gru_in,
            layers,
            classifier,
        })
    }
}

impl ModelParams {
    /// All-zero parameters with the shapes `dims` dictates.
    pub fn zeros(dims: ModelDims) -> Self {
        let (c, h, d) = (dims.hidden, dims.half(), dims.attr_dim);
        let m = |r, k| Tensor::zeros(&[r, k]);
        let v = |n| Tensor::zeros(&[n]);
        let gru = || Gru {
            w_r: m(h, h),
            w_u: m(h, h),
            w_n: m(h, h),
            u_r: m(h, h),
            u_u: m(h, h),
            u_n: m(h, h),
            b_r: v(h),
            b_u: v(h),
            b_n: v(h),
        };
        Self {
            proj_out: Linear { w: m(h, d), b: v(h) },
            proj_in: Linear { w: m(h, d), b: v(h) },
            gru_out: gru(),
            gru_in: gru(),
            layers: (0..dims.layers)
                .map(|_| Mgd {
                    w2: m(c, c),
                    b2: v(c),
                    w3: m(c, 2 * c),
                    q: m(1, c),
                })
                .collect(),
            classifier: Classifier {
                w1: m(c, c),
                b1: v(c),
                w2: m(1, c),
                b2: v(1),
            },
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            hidden: self.classifier.w1.shape()[0],
            attr_dim: self.proj_out.w.shape()[1],
            layers: self.layers.len(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every block as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<ParamTree<Var>> {
        self.try_map(|t| tape.param(t.clone()))
    }

    /// Registers every block as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Result<ParamTree<Var>> {
        self.try_map(|t| tape.constant(t.clone()))
    }
}

/// Input-side gate pre-activations `(W_r z + b_r, W_u z + b_u, W_n z + b_n)`.
fn gru_input_gates(tape: &mut Tape, z: Var, gru: &Gru<Var>) -> Result<(Var, Var, Var)> {
    Ok((
        tape.linear(z, gru.w_r, gru.b_r)?,
        tape.linear(z, gru.w_u, gru.b_u)?,
        tape.linear(z, gru.w_n, gru.b_n)?,
    ))
}

/// Recurrent half of a GRU step given precomputed input gates.
fn gru_step(tape: &mut Tape, gates: (Var, Var, Var), h_prev: Var, gru: &Gru<Var>) -> Result<Var> {
    let (gr, gu, gn) = gates;
    let hr = tape.matmul_nt(h_prev, gru.u_r)?;
    let r = tape.add(gr, hr)?;
    let r = tape.sigmoid(r)?;
    let hu = tape.matmul_nt(h_prev, gru.u_u)?;
    let u = tape.add(gu, hu)?;
    let u = tape.sigmoid(u)?;
    let rh = tape.mul(r, h_prev)?;
    let hn = tape.matmul_nt(rh, gru.u_n)?;
    let n = tape.add(gn, hn)?;
    let n = tape.tanh(n)?;
    // (1 - u) ⊙ n + u ⊙ h  ==  n + u ⊙ (h - n)
    let diff = tape.sub(h_prev, n)?;
    let gated = tape.mul(u, diff)?;
    tape.add(n, gated)
}

/// One GRU step on a batch of rows: `z` and `h_prev` are `rows x c/2`.
pub fn gru_cell(tape: &mut Tape, z: Var, h_prev: Var, gru: &Gru<Var>) -> Result<Var> {
    if tape.value(z).shape() != tape.value(h_prev).shape() {
        return Err(Error::Argument("gru_cell: input and state shapes differ".into()));
    }
    let gates = gru_input_gates(tape, z, gru)?;
    gru_step(tape, gates, h_prev, gru)
}

/// Encodes one direction for a batch of nodes. Output row `i` belongs to
/// `seqs[i]`.
fn encode_direction(
    tape: &mut Tape,
    seqs: &[&EdgeSequences],
    dir: Direction,
    proj: &Linear<Var>,
    gru: &Gru<Var>,
    dims: ModelDims,
) -> Result<Var> {
    let d = dims.attr_dim;
    let lens: Vec<usize> = seqs.iter().map(|s| s.get(dir).len()).collect();
    if lens.contains(&0) {
        return Err(Error::Argument("edge sequences must be non-empty".into()));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]));
    let max_len = lens[order[0]];
    // active[t]: sequences still running at step t (a prefix of `order`)
    let active: Vec<usize> = (0..max_len)
        .map(|t| order.iter().take_while(|&&i| lens[i] > t).count())
        .collect();

    let total: usize = active.iter().sum();
    let mut packed = Vec::with_capacity(total * d);
    for (t, &k) in active.iter().enumerate() {
        for &i in &order[..k] {
            let x = &seqs[i].get(dir)[t];
            if x.len() != d {
                return Err(Error::Argument(format!(
                    "edge attribute length {} does not match dimension {d}",
                    x.len()
                )));
            }
            packed.extend_from_slice(x);
        }
    }
    let x = tape.constant(Tensor::matrix(total, d, packed)?)?;
    let z = tape.linear(x, proj.w, proj.b)?;
    let (gr, gu, gn) = gru_input_gates(tape, z, gru)?;
    let pooled = tape.gru_sequence([gr, gu, gn], [gru.u_r, gru.u_u, gru.u_n], active)?;
    let mut inverse = vec![0; seqs.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    if inverse.iter().enumerate().all(|(i, &p)| i == p) {
        Ok(pooled)
    } else {
        tape.gather_rows(pooled, inverse)
    }
}

/// Edge2Seq for a batch of nodes: `seqs.len() x c`, outgoing half first.
pub fn edge2seq_batch(tape: &mut Tape, seqs: &[&EdgeSequences], params: &ParamTree<Var>, dims: ModelDims) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Argument("edge2seq on an empty node set".into()));
    }
    let h_out = encode_direction(tape, seqs, Direction::Out, &params.proj_out, &params.gru_out, dims)?;
    let h_in = encode_direction(tape, seqs, Direction::In, &params.proj_in, &params.gru_in, dims)?;
    tape.concat_cols(h_out, h_in)
}

/// Edge2Seq for one node: a `1 x c` row.
pub fn edge2seq_encode(tape: &mut Tape, seqs: &EdgeSequences, params: &ParamTree<Var>, dims: ModelDims) -> Result<Var> {
    edge2seq_batch(tape, &[seqs], params, dims)
}

/// Softmax of `LeakyReLU(⟨z, q⟩), LeakyReLU(⟨r_in, q⟩), LeakyReLU(⟨r_out, q⟩)`
/// per row; returns an `n x 3` matrix of weights.
pub fn attention_weights(tape: &mut Tape, z: Var, r_in: Var, r_out: Var, q: Var, slope: f64) -> Result<Var> {
    let mut scores = Vec::with_capacity(3);
    for part in [z, r_in, r_out] {
        let s = tape.matmul_nt(part, q)?;
        scores.push(tape.leaky_relu(s, slope)?);
    }
    let zw = tape.concat_cols(scores[0], scores[1])?;
    let all = tape.concat_cols(zw, scores[2])?;
    tape.softmax(all)
}

/// Intermediate values of one MGD layer, rows aligned with `centers`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub centers: Vec<NodeId>,
    pub z: Var,
    pub r_in: Var,
    pub r_out: Var,
    /// `None` under the no-attention ablation (all weights 1).
    pub alpha: Option<Var>,
    pub h: Var,
}

fn position(nodes: &[NodeId], v: NodeId) -> Result<usize> {
    nodes
        .binary_search(&v)
        .map_err(|_| Error::Internal(format!("node {v} has no representation in this layer")))
}

/// One MGD layer.
///
/// `h_prev` holds representations for `inputs` (sorted); the layer produces
/// rows for `centers` (sorted, a subset of `inputs`) from the sampled
/// `edges`, whose neighbors must all be in `inputs`.
pub fn mgd_layer(
    tape: &mut Tape,
    h_prev: Var,
    inputs: &[NodeId],
    centers: &[NodeId],
    edges: &[SampledEdge],
    layer: &Mgd<Var>,
    no_attention: bool,
) -> Result<LayerTrace> {
    let c = tape.value(layer.w2).shape()[0];
    let z_all = tape.linear(h_prev, layer.w2, layer.b2)?;
    let center_rows = centers.iter().map(|&v| position(inputs, v)).collect::<Result<Vec<_>>>()?;
    let z = tape.gather_rows(z_all, center_rows)?;

    let mut r = [None, None];
    for (slot, dir) in [Direction::In, Direction::Out].into_iter().enumerate() {
        let mut nbr_rows = Vec::new();
        let mut ctr_rows = Vec::new();
        let mut segment = Vec::new();
        for e in edges.iter().filter(|e| e.direction == dir) {
            nbr_rows.push(position(inputs, e.neighbor)?);
            ctr_rows.push(position(inputs, e.center)?);
            segment.push(position(centers, e.center)?);
        }
        r[slot] = Some(if segment.is_empty() {
            tape.constant(Tensor::zeros(&[centers.len(), c]))?
        } else {
            let z_u = tape.gather_rows(z_all, nbr_rows)?;
            let z_v = tape.gather_rows(z_all, ctr_rows)?;
            let diff = tape.sub(z_v, z_u)?;
            let msg_in = tape.concat_cols(z_u, diff)?;
            let msg = tape.matmul_nt(msg_in, layer.w3)?;
            tape.scatter_add_rows(msg, segment, centers.len())?
        });
    }
    let (r_in, r_out) = (r[0].unwrap(), r[1].unwrap());

    let (alpha, h) = if no_attention {
        let s = tape.add(z, r_in)?;
        (None, tape.add(s, r_out)?)
    } else {
        let alpha = attention_weights(tape, z, r_in, r_out, layer.q, LEAKY_RELU_SLOPE)?;
        let mut terms = Vec::with_capacity(3);
        for (k, part) in [z, r_in, r_out].into_iter().enumerate() {
            let a = tape.slice_cols(alpha, k, 1)?;
            terms.push(tape.scale_rows(part, a)?);
        }
        let shape = tape.value(z).shape().to_vec();
        (Some(alpha), tape.accumulate(&terms, &shape)?)
    };
    Ok(LayerTrace {
        centers: centers.to_vec(),
        z,
        r_in,
        r_out,
        alpha,
        h,
    })
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut impl rand::Rng) -> Result<Var> {
    let keep = 1.0 - rate;
    let n = tape.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}

/// Two-layer MLP with sigmoid output; `h` is `n x c`, result `n x 1`.
pub fn classify(tape: &mut Tape, h: Var, cls: &Classifier<Var>) -> Result<Var> {
    classify_inner(tape, h, cls, None)
}

fn classify_inner(
    tape: &mut Tape,
    h: Var,
    cls: &Classifier<Var>,
    drop: Option<(f64, &mut rand_chacha::ChaCha8Rng)>,
) -> Result<Var> {
    let a = tape.linear(h, cls.w1, cls.b1)?;
    let mut a = tape.relu(a)?;
    if let Some((rate, rng)) = drop {
        a = dropout(tape, a, rate, rng)?;
    }
    let logit = tape.linear(a, cls.w2, cls.b2)?;
    tape.sigmoid(logit)
}

/// Summed binary cross-entropy over the batch.
pub fn bce_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|&b| b as u8 as f64).collect();
    tape.bce_sum(probs, &y, PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub ablation: Ablation,
    /// Dropout rate; applied only when `dropout_seed` is set.
    pub dropout: f64,
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn eval(ablation: Ablation) -> Self {
        Self {
            ablation,
            dropout: 0.0,
            dropout_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `targets.len() x 1`, in block target order.
    pub probs: Var,
    /// Layer-0 representations, rows aligned with the deepest depth set used.
    pub h0: Var,
    pub layers: Vec<LayerTrace>,
}

/// Where the layer-0 representations come from.
#[derive(Debug, Clone, Copy)]
pub enum Encoding<'a> {
    /// Run the sequence encoder on the block's node closure.
    Sequences(&'a SequenceCache),
    /// Rows of `h` already hold encodings for the sorted `nodes`, a superset
    /// of the closure (inference reuses one encoding across batches).
    Precomputed { nodes: &'a [NodeId], h: Var },
}

/// Full forward pass over a sampled block.
///
/// Layer `l` (1-based) consumes hop `L - l + 1` and yields representations
/// for every node still needed at depth `L - l`; the last layer covers the
/// targets.
pub fn forward(
    tape: &mut Tape,
    block: &Block,
    cache: &SequenceCache,
    params: &ParamTree<Var>,
    dims: ModelDims,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    forward_with(tape, block, Encoding::Sequences(cache), params, dims, opts)
}

pub fn forward_with(
    tape: &mut Tape,
    block: &Block,
    encoding: Encoding<'_>,
    params: &ParamTree<Var>,
    dims: ModelDims,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let hops = if opts.ablation == Ablation::NoMgd { 0 } else { dims.layers };
    if params.layers.len() < hops {
        return Err(Error::Argument("parameters have fewer MGD layers than configured".into()));
    }
    if block.num_hops() < hops {
        return Err(Error::Argument(format!(
            "block has {} hops but the model needs {hops}",
            block.num_hops()
        )));
    }
    let mut rng = opts.dropout_seed.map(stream);
    let rate = opts.dropout;

    // Only the depth sets the active layers need.
    let closure = &block.depth_sets[hops];
    let h0 = match encoding {
        Encoding::Sequences(cache) => {
            let seqs: Vec<&EdgeSequences> = closure.iter().map(|&v| cache.get(v)).collect();
            edge2seq_batch(tape, &seqs, params, dims)?
        }
        Encoding::Precomputed { nodes, h } => {
            let rows = closure.iter().map(|&v| position(nodes, v)).collect::<Result<Vec<_>>>()?;
            tape.gather_rows(h, rows)?
        }
    };

    let mut h = h0;
    let mut traces = Vec::with_capacity(hops);
    for l in 1..=hops {
        let k = hops - l + 1;
        let trace = mgd_layer(
            tape,
            h,
            &block.depth_sets[k],
            &block.depth_sets[k - 1],
            &block.hops[k - 1].edges,
            &params.layers[l - 1],
            opts.ablation == Ablation::NoAttention,
        )?;
        h = trace.h;
        if l < hops {
            if let Some(r) = rng.as_mut() {
                h = dropout(tape, h, rate, r)?;
            }
        }
        traces.push(trace);
    }
    let final_nodes = &block.depth_sets[0];
    let rows = block
        .targets
        .iter()
        .map(|&v| position(final_nodes, v))
        .collect::<Result<Vec<_>>>()?;
    let h_targets = if rows.iter().enumerate().all(|(i, &r)| i == r) && rows.len() == final_nodes.len() {
        h
    } else {
        tape.gather_rows(h, rows)?
    };
    let probs = classify_inner(tape, h_targets, &params.classifier, rng.as_mut().map(|r| (rate, r)))?;
    Ok(ForwardOutput {
        probs,
        h0,
        layers: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeRecord, Multigraph};
    use crate::sampler::sample_block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(dims: ModelDims, seed: u64, scale: f64) -> ModelParams {
        let mut p = ModelParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
        p
    }

    fn small_graph() -> Multigraph {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut edges = Vec::new();
        for i in 0..30 {
            let s = rng.random_range(0..8);
            let d = rng.random_range(0..8);
            edges.push(EdgeRecord::new(s, d, i as f64, vec![rng.random_range(-1.0..1.0), i as f64 / 30.0]));
        }
        // a bundle of parallel edges
        for i in 0..4 {
            edges.push(EdgeRecord::new(1, 2, 40.0 + i as f64, vec![0.5, 0.1 * i as f64]));
        }
        Multigraph::build(9, 2, edges).unwrap()
    }

    #[test]
    fn gru_cell_zero_parameters() {
        let dims = ModelDims::new(4, 1, 0).unwrap();
        let p = ModelParams::zeros(dims);
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let z = t.constant(Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap()).unwrap();
        let h0 = t.constant(Tensor::zeros(&[1, 2])).unwrap();
        let h = gru_cell(&mut t, z, h0, &b.gru_out).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 0.0]);
        let v = t.constant(Tensor::matrix(1, 2, vec![0.8, -2.0]).unwrap()).unwrap();
        let h = gru_cell(&mut t, z, v, &b.gru_out).unwrap();
        assert_eq!(t.value(h).data(), &[0.4, -1.0]);
    }

    #[test]
    fn attention_equal_inputs_and_zero_q() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(1, 3, vec![0.2, -0.5, 1.0]).unwrap()).unwrap();
        let q = t.constant(Tensor::matrix(1, 3, vec![0.4, 0.1, -0.9]).unwrap()).unwrap();
        let a = attention_weights(&mut t, z, z, z, q, LEAKY_RELU_SLOPE).unwrap();
        for &v in t.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let r = t.constant(Tensor::matrix(1, 3, vec![5.0, 1.0, 2.0]).unwrap()).unwrap();
        let q0 = t.constant(Tensor::zeros(&[1, 3])).unwrap();
        let a = attention_weights(&mut t, z, r, z, q0, LEAKY_RELU_SLOPE).unwrap();
        for &v in t.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_zero_weights_gives_half() {
        let dims = ModelDims::new(4, 2, 0).unwrap();
        let p = ModelParams::zeros(dims);
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let h = t.constant(Tensor::matrix(2, 4, vec![1.0; 8]).unwrap()).unwrap();
        let pr = classify(&mut t, h, &b.classifier).unwrap();
        assert_eq!(t.value(pr).data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_step_sequence_pools_to_its_state() {
        let dims = ModelDims::new(6, 2, 0).unwrap();
        let p = random_params(dims, 1, 0.5);
        let seqs = EdgeSequences {
            node: 0,
            x_in: vec![vec![0.1, 0.2], vec![0.3, -0.1]],
            x_out: vec![vec![0.7, -0.3]],
            t_in: vec![0.0, 1.0],
            t_out: vec![0.0],
        };
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let h = edge2seq_encode(&mut t, &seqs, &b, dims).unwrap();
        // recompute the outgoing half by hand from one GRU cell
        let x = t.constant(Tensor::matrix(1, 2, vec![0.7, -0.3]).unwrap()).unwrap();
        let z = t.matmul_nt(x, b.proj_out.w).unwrap();
        let z = t.add_row_bias(z, b.proj_out.b).unwrap();
        let h0 = t.constant(Tensor::zeros(&[1, 3])).unwrap();
        let s = gru_cell(&mut t, z, h0, &b.gru_out).unwrap();
        assert_eq!(&t.value(h).data()[..3], t.value(s).data());
    }

    /// Step-by-step composition of elementary ops, for comparison with the fused op.
    fn unfused_encode(tape: &mut Tape, seq: &[Vec<f64>], proj: &Linear<Var>, gru: &Gru<Var>, half: usize) -> Var {
        let d = seq[0].len();
        let mut h = tape.constant(Tensor::zeros(&[1, half])).unwrap();
        let mut states = Vec::new();
        for x in seq {
            let x = tape.constant(Tensor::matrix(1, d, x.clone()).unwrap()).unwrap();
            let z = tape.matmul_nt(x, proj.w).unwrap();
            let z = tape.add_row_bias(z, proj.b).unwrap();
            h = gru_cell(tape, z, h, gru).unwrap();
            states.push(h);
        }
        tape.reduce_max_over_sequence(&states).unwrap()
    }

    #[test]
    fn fused_sequence_matches_unfused_values_and_gradients() {
        let g = small_graph();
        let cache = SequenceCache::new(&g, 5).unwrap();
        let dims = ModelDims::new(6, 2, 0).unwrap();
        let p = random_params(dims, 11, 0.6);
        let nodes: Vec<NodeId> = (0..g.node_count()).collect();

        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let seqs: Vec<&EdgeSequences> = nodes.iter().map(|&v| cache.get(v)).collect();
        let fused = edge2seq_batch(&mut t, &seqs, &b, dims).unwrap();
        let loss = t.sum_all(fused).unwrap();
        let gf = t.backward(loss).unwrap();

        let mut u = Tape::new();
        let bu = p.bind(&mut u).unwrap();
        let mut rows = Vec::new();
        for &v in &nodes {
            let s = cache.get(v);
            let ho = unfused_encode(&mut u, &s.x_out, &bu.proj_out, &bu.gru_out, 3);
            let hi = unfused_encode(&mut u, &s.x_in, &bu.proj_in, &bu.gru_in, 3);
            rows.push(u.concat_cols(ho, hi).unwrap());
        }
        for (i, r) in rows.iter().enumerate() {
            for (x, y) in t.value(fused).row(i).iter().zip(u.value(*r).data()) {
                assert!((x - y).abs() < 1e-13);
            }
        }
        let sums: Vec<Var> = rows.iter().map(|&r| u.sum_all(r).unwrap()).collect();
        let loss_u = u.accumulate(&sums, &[1]).unwrap();
        let gu = u.backward(loss_u).unwrap();
        for ((name, &vf), (_, &vu)) in b.named().into_iter().zip(bu.named()) {
            let (a, c) = (gf.get(vf), gu.get(vu));
            for (x, y) in a.data().iter().zip(c.data()) {
                assert!((x - y).abs() < 1e-11, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn swapping_directions_swaps_halves() {
        let dims = ModelDims::new(6, 2, 0).unwrap();
        let mut p = random_params(dims, 2, 0.5);
        p.proj_in = p.proj_out.clone();
        p.gru_in = p.gru_out.clone();
        let a = EdgeSequences {
            node: 0,
            x_in: vec![vec![0.1, 0.2], vec![0.3, -0.1]],
            x_out: vec![vec![0.7, -0.3]],
            t_in: vec![0.0, 1.0],
            t_out: vec![0.0],
        };
        let b = EdgeSequences {
            node: 0,
            x_in: a.x_out.clone(),
            x_out: a.x_in.clone(),
            t_in: a.t_out.clone(),
            t_out: a.t_in.clone(),
        };
        let mut t = Tape::new();
        let bound = p.bind(&mut t).unwrap();
        let ha = edge2seq_encode(&mut t, &a, &bound, dims).unwrap();
        let hb = edge2seq_encode(&mut t, &b, &bound, dims).unwrap();
        let (ha, hb) = (t.value(ha).data().to_vec(), t.value(hb).data().to_vec());
        assert_eq!(&ha[..3], &hb[3..]);
        assert_eq!(&ha[3..], &hb[..3]);
    }

    #[test]
    fn packed_batch_matches_one_at_a_time() {
        let g = small_graph();
        let cache = SequenceCache::new(&g, 3).unwrap();
        let dims = ModelDims::new(6, 2, 0).unwrap();
        let p = random_params(dims, 4, 0.5);
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let all: Vec<&EdgeSequences> = (0..g.node_count()).map(|v| cache.get(v)).collect();
        let batch = edge2seq_batch(&mut t, &all, &b, dims).unwrap();
        for v in 0..g.node_count() {
            let one = edge2seq_encode(&mut t, cache.get(v), &b, dims).unwrap();
            let got = t.value(batch).row(v).to_vec();
            let want = t.value(one).data().to_vec();
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_in_neighborhood_gives_zero_message() {
        let g = Multigraph::build(2, 1, vec![EdgeRecord::new(0, 1, 0.0, vec![1.0])]).unwrap();
        let cache = SequenceCache::new(&g, 4).unwrap();
        let dims = ModelDims::new(4, 1, 1).unwrap();
        let p = random_params(dims, 5, 0.5);
        let block = sample_block(&g, &[0], &[5], 0).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let out = forward(&mut t, &block, &cache, &b, dims, &ForwardOptions::eval(Ablation::None)).unwrap();
        let tr = &out.layers[0];
        assert!(t.value(tr.r_in).data().iter().all(|&v| v == 0.0));
        // h = a1 z + a3 r_out exactly
        let a = t.value(tr.alpha.unwrap()).data().to_vec();
        let (z, ro, h) = (t.value(tr.z).data(), t.value(tr.r_out).data(), t.value(tr.h).data());
        for j in 0..4 {
            assert_eq!(h[j], a[0] * z[j] + a[1] * 0.0 + a[2] * ro[j]);
        }
    }

    #[test]
    fn identical_neighbors_have_zero_discrepancy() {
        // two nodes with identical sequences feeding a third
        let g = Multigraph::build(
            3,
            1,
            vec![EdgeRecord::new(0, 2, 0.0, vec![1.0]), EdgeRecord::new(1, 2, 0.0, vec![1.0])],
        )
        .unwrap();
        let cache = SequenceCache::new(&g, 4).unwrap();
        let dims = ModelDims::new(4, 1, 1).unwrap();
        let p = random_params(dims, 6, 0.5);
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let h = edge2seq_batch(&mut t, &[cache.get(0), cache.get(1)], &b, dims).unwrap();
        assert_eq!(t.value(h).row(0), t.value(h).row(1));
    }

    #[test]
    fn ablations_shape_the_forward() {
        let g = small_graph();
        let cache = SequenceCache::new(&g, 4).unwrap();
        let dims = ModelDims::new(6, 2, 2).unwrap();
        let p = random_params(dims, 7, 0.4);
        let block = sample_block(&g, &[1, 2, 5], &[25, 10], 0).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t).unwrap();
        let out = forward(&mut t, &block, &cache, &b, dims, &ForwardOptions::eval(Ablation::NoAttention)).unwrap();
        assert_eq!(out.layers.len(), 2);
        assert!(out.layers.iter().all(|l| l.alpha.is_none()));
        let tr = &out.layers[1];
        let (z, ri, ro, h) = (t.value(tr.z), t.value(tr.r_in), t.value(tr.r_out), t.value(tr.h));
        for k in 0..h.numel() {
            assert_eq!(h.data()[k], z.data()[k] + ri.data()[k] + ro.data()[k]);
        }
        let out = forward(&mut t, &block, &cache, &b, dims, &ForwardOptions::eval(Ablation::NoMgd)).unwrap();
        assert!(out.layers.is_empty());
        assert_eq!(t.value(out.probs).shape(), &[3, 1]);
    }

    #[test]
    fn dropout_only_when_seeded() {
        let g = small_graph();
        let cache = SequenceCache::new(&g, 4).unwrap();
        let dims = ModelDims::new(6, 2, 2).unwrap();
        let p = random_params(dims, 8, 0.4);
        let block = sample_block(&g, &[1, 2], &[25, 10], 0).unwrap();
        let run = |opts: ForwardOptions| {
            let mut t = Tape::new();
            let b = p.bind(&mut t).unwrap();
            let out = forward(&mut t, &block, &cache, &b, dims, &opts).unwrap();
            t.value(out.probs).data().to_vec()
        };
        let eval = run(ForwardOptions::eval(Ablation::None));
        assert_eq!(eval, run(ForwardOptions::eval(Ablation::None)));
        let drop = ForwardOptions {
            ablation: Ablation::None,
            dropout: 0.5,
            dropout_seed: Some(1),
        };
        assert_ne!(eval, run(drop));
        assert_eq!(run(drop), run(drop));
    }

    #[test]
    fn missing_neighbor_is_internal_error() {
        let mut t = Tape::new();
        let dims = ModelDims::new(2, 1, 1).unwrap();
        let p = ModelParams::zeros(dims);
        let b = p.bind(&mut t).unwrap();
        let h = t.constant(Tensor::zeros(&[1, 2])).unwrap();
        let e = SampledEdge {
            center: 0,
            direction: Direction::In,
            edge: 0,
            neighbor: 7,
        };
        let err = mgd_layer(&mut t, h, &[0], &[0], &[e], &b.layers[0], false).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }
}
