//! Dense double-precision tensors and a reverse-mode differentiation tape.
//!
//! Tensors are rank 1 or rank 2, row-major. A rank-1 tensor of length `n`
//! behaves as a `1 x n` row wherever an op needs rows. The op set is exactly
//! what the model uses; there is no general broadcasting beyond adding a bias
//! vector to every row and scaling rows by a column of factors.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NumericalFault`] instead of recording a poisoned value.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Argument(format!("unsupported tensor rank {}", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("rank 1 or 2")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count, treating rank 1 as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

impl Activation {
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Linear { x: Var, w: Var, b: Var },
    GruSequence(Box<GruTrace>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    MulConst(Var, Vec<f64>),
    Unary(Var, Activation),
    Softmax(Var),
    Concat(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterAddRows { x: Var, index: Vec<usize> },
    MaxPool { inputs: Vec<Var>, argmax: Vec<u32> },
    Accumulate(Vec<Var>),
    SumAll(Var),
    Bce { p: Var, labels: Vec<f64>, eps: f64 },
}

/// Saved activations of a packed GRU run.
#[derive(Debug, Clone)]
struct GruTrace {
    gates: [Var; 3],
    recur: [Var; 3],
    steps: Vec<usize>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
    /// Packed row that produced each pooled output element.
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward operations for one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    beta: f64,
) {
    // a is m x k (or k x m transposed), b is k x n (or n x k transposed)
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), out).unwrap();
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Argument(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericalFault { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::Argument("matmul needs rank-2 operands".into()));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (kb, n) = if transpose_b {
            (tb.shape[1], tb.shape[0])
        } else {
            (tb.shape[0], tb.shape[1])
        };
        if k != kb {
            return Err(Error::Argument(format!(
                "matmul inner dimension mismatch: {:?} x {:?}{}",
                ta.shape,
                tb.shape,
                if transpose_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm((m, k, n), &ta.data, false, &tb.data, transpose_b, &mut out, 0.0);
        let rg = self.requires(a) || self.requires(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, transpose_b }, rg, "matmul")
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; with `b` stored as `out x in` this applies a linear map to every row of `a`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x · wᵀ + b` with `w` stored as `out x in` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.cols() != tw.cols() || tb.numel() != tw.rows() {
            return Err(Error::Argument(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                tx.shape, tw.shape, tb.shape
            )));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&tb.data);
        }
        gemm((m, k, n), &tx.data, false, &tw.data, true, &mut out, 1.0);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(Tensor::new(&[m, n], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Runs a GRU over a packed batch of sequences and max-pools each
    /// sequence's states over time.
    ///
    /// `steps[t]` is how many sequences are still running at step `t`; it
    /// never increases, and the running sequences are always the leading
    /// rows. `gates` hold the input-side pre-activations for the reset,
    /// update and candidate gates of every packed row (time-major, `Σ steps x h`);
    /// `recur` holds the recurrent matrices `U_r, U_u, U_n` (`h x h`). From a
    /// zero state each step computes
    ///
    /// ```text
    /// r  = σ(g_r + h U_rᵀ)
    /// u  = σ(g_u + h U_uᵀ)
    /// n  = tanh(g_n + (r ⊙ h) U_nᵀ)
    /// h' = (1 - u) ⊙ n + u ⊙ h
    /// ```
    ///
    /// Output row `i` is the elementwise max of sequence `i`'s states; the
    /// earliest step wins ties.
    pub fn gru_sequence(&mut self, gates: [Var; 3], recur: [Var; 3], steps: Vec<usize>) -> Result<Var> {
        let hd = self.value(recur[0]).rows();
        for &u in &recur {
            if self.value(u).shape != [hd, hd] {
                return Err(Error::Argument("gru_sequence: recurrent matrices must be square and equal".into()));
            }
        }
        if steps.is_empty() || steps[0] == 0 || steps.windows(2).any(|w| w[1] > w[0] || w[1] == 0) {
            return Err(Error::Argument(
                "gru_sequence: step sizes must be positive and non-increasing".into(),
            ));
        }
        let total: usize = steps.iter().sum();
        for &g in &gates {
            if self.value(g).shape != [total, hd] {
                return Err(Error::Argument(format!(
                    "gru_sequence: gate input {:?} does not match {total} packed rows of width {hd}",
                    self.value(g).shape
                )));
            }
        }
        let (gr, gu, gn) = (
            &self.value(gates[0]).data,
            &self.value(gates[1]).data,
            &self.value(gates[2]).data,
        );
        let (ur, uu, un) = (
            &self.value(recur[0]).data,
            &self.value(recur[1]).data,
            &self.value(recur[2]).data,
        );
        let len = total * hd;
        let (mut r, mut u, mut n, mut h) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let mut a = vec![0.0; steps[0] * hd];
        let mut rh = vec![0.0; steps[0] * hd];
        let (mut prev, mut off) = (0, 0);
        for (t, &k) in steps.iter().enumerate() {
            let cur = off * hd..(off + k) * hd;
            let (done, rest) = h.split_at_mut(off * hd);
            let hc = &mut rest[..k * hd];
            if t == 0 {
                for i in cur.clone() {
                    r[i] = sigmoid(gr[i]);
                    u[i] = sigmoid(gu[i]);
                    n[i] = gn[i].tanh();
                    hc[i - off * hd] = (1.0 - u[i]) * n[i];
                }
            } else {
                let hp = &done[prev * hd..(prev + k) * hd];
                let a = &mut a[..k * hd];
                gemm((k, hd, hd), hp, false, ur, true, a, 0.0);
                for (j, i) in cur.clone().enumerate() {
                    r[i] = sigmoid(gr[i] + a[j]);
                    rh[j] = r[i] * hp[j];
                }
                gemm((k, hd, hd), hp, false, uu, true, a, 0.0);
                for (j, i) in cur.clone().enumerate() {
                    u[i] = sigmoid(gu[i] + a[j]);
                }
                gemm((k, hd, hd), &rh[..k * hd], false, un, true, a, 0.0);
                for (j, i) in cur.clone().enumerate() {
                    n[i] = (gn[i] + a[j]).tanh();
                    hc[j] = n[i] + u[i] * (hp[j] - n[i]);
                }
            }
            prev = off;
            off += k;
        }
        let n0 = steps[0] * hd;
        let mut out = h[..n0].to_vec();
        let mut argmax: Vec<u32> = (0..n0).map(|k| (k / hd) as u32).collect();
        let mut off = steps[0];
        for &k in &steps[1..] {
            for (e, &x) in h[off * hd..(off + k) * hd].iter().enumerate() {
                if x > out[e] {
                    out[e] = x;
                    argmax[e] = (off + e / hd) as u32;
                }
            }
            off += k;
        }
        let rg = gates.iter().chain(&recur).any(|&v| self.requires(v));
        let trace = GruTrace {
            gates,
            recur,
            steps,
            r,
            u,
            n,
            h,
            argmax,
        };
        self.push(
            Tensor::new(&[n0 / hd.max(1), hd], out)?,
            Op::GruSequence(Box::new(trace)),
            rg,
            "gru_sequence",
        )
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(&ta.shape.clone(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds bias vector `b` (length = cols) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::Argument(format!(
                "bias length {} does not match {} columns",
                tb.numel(),
                c
            )));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            for (v, bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let t = Tensor::new(&tx.shape.clone(), data)?;
        let rg = self.requires(x) || self.requires(b);
        self.push(t, Op::AddRowBias(x, b), rg, "add_row_bias")
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(&tx.shape.clone(), tx.data.iter().map(|v| v * alpha).collect())?;
        let rg = self.requires(x);
        self.push(t, Op::Scale(x, alpha), rg, "scale")
    }

    /// Row `i` of `x` times `s[i]`; `s` holds one factor per row
    /// (a single factor for a rank-1 `x`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = (tx.rows(), tx.cols());
        if ts.numel() != r {
            return Err(Error::Argument(format!(
                "scale_rows: {} factors for {} rows",
                ts.numel(),
                r
            )));
        }
        let mut data = tx.data.clone();
        for (row, f) in data.chunks_mut(c.max(1)).zip(&ts.data) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let t = Tensor::new(&tx.shape.clone(), data)?;
        let rg = self.requires(x) || self.requires(s);
        self.push(t, Op::ScaleRows(x, s), rg, "scale_rows")
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Argument("mul_const: mask length mismatch".into()));
        }
        let data = tx.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(&tx.shape.clone(), data)?;
        let rg = self.requires(x);
        self.push(t, Op::MulConst(x, mask), rg, "mul_const")
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(&tx.shape.clone(), tx.data.iter().map(|&v| f.forward(v)).collect())?;
        let rg = self.requires(x);
        self.push(t, Op::Unary(x, f), rg, "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    /// Softmax over the last axis (every row of a matrix), max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(Error::Argument("softmax over an empty axis".into()));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(&tx.shape.clone(), data)?;
        let rg = self.requires(x);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// Concatenation of two rank-1 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 1 || self.value(b).rank() != 1 {
            return Err(Error::Argument("concat needs rank-1 operands".into()));
        }
        self.concat_impl(a, b)
    }

    /// Row-wise concatenation `[a | b]` of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(Error::Argument("concat_cols needs rank-2 operands".into()));
        }
        self.concat_impl(a, b)
    }

    fn concat_impl(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Argument("concat: row count mismatch".into()));
        }
        let (r, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data[i * q..(i + 1) * q]);
        }
        let shape = if ta.rank() == 1 { vec![p + q] } else { vec![r, p + q] };
        let t = Tensor::new(&shape, data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(t, Op::Concat(a, b), rg, "concat")
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.rows() {
            return Err(Error::Argument("slice_rows out of range".into()));
        }
        let c = tx.cols();
        let t = Tensor::new(&[len, c], tx.data[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires(x);
        self.push(t, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.cols() {
            return Err(Error::Argument("slice_cols out of range".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(&[r, len], data)?;
        let rg = self.requires(x);
        self.push(t, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Argument("gather_rows needs a matrix".into()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(Error::Argument(format!("gather_rows index {i} out of {r} rows")));
            }
            data.extend_from_slice(&tx.data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[index.len(), c], data)?;
        let rg = self.requires(x);
        self.push(t, Op::GatherRows { x, index }, rg, "gather_rows")
    }

    /// Segment sum: output row `j` is the sum of rows `i` of `x` with
    /// `index[i] == j`. Rows nobody maps to are zero.
    pub fn scatter_add_rows(&mut self, x: Var, index: Vec<usize>, out_rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || index.len() != tx.rows() {
            return Err(Error::Argument("scatter_add_rows: index length mismatch".into()));
        }
        let c = tx.cols();
        let mut data = vec![0.0; out_rows * c];
        for (i, &j) in index.iter().enumerate() {
            if j >= out_rows {
                return Err(Error::Argument(format!("scatter index {j} out of {out_rows} rows")));
            }
            let src = &tx.data[i * c..(i + 1) * c];
            for (d, s) in data[j * c..(j + 1) * c].iter_mut().zip(src) {
                *d += s;
            }
        }
        let t = Tensor::new(&[out_rows, c], data)?;
        let rg = self.requires(x);
        self.push(t, Op::ScatterAddRows { x, index }, rg, "scatter_add_rows")
    }

    /// Coordinatewise max over a sequence of equal-shape tensors. Gradient
    /// goes to the earliest position attaining the max.
    pub fn reduce_max_over_sequence(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Argument("max over an empty sequence".into()))?;
        for &v in inputs {
            same_shape("reduce_max_over_sequence", self.value(*first), self.value(v))?;
        }
        self.max_pool_ragged(inputs)
    }

    /// Max over a ragged sequence of matrices whose row counts never
    /// increase: output row `i` is the max over every step that still has a
    /// row `i`. This is the packed form used for a batch of sequences sorted
    /// by length. Earliest step wins ties.
    pub fn max_pool_ragged(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Argument("max over an empty sequence".into()))?;
        let t0 = self.value(first);
        let shape = t0.shape.clone();
        let (rows, c) = (t0.rows(), t0.cols());
        let mut out = t0.data.clone();
        let mut argmax = vec![0u32; out.len()];
        let mut prev_rows = rows;
        for (step, &v) in inputs.iter().enumerate().skip(1) {
            let tv = self.value(v);
            if tv.cols() != c || tv.rows() > prev_rows {
                return Err(Error::Argument(
                    "max pooling needs equal widths and non-increasing row counts".into(),
                ));
            }
            prev_rows = tv.rows();
            for (k, &x) in tv.data.iter().enumerate() {
                if x > out[k] {
                    out[k] = x;
                    argmax[k] = step as u32;
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.requires(v));
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::MaxPool {
                inputs: inputs.to_vec(),
                argmax,
            },
            rg,
            "max_pool",
        )
    }

    /// Sum of equal-shape tensors; an empty list gives zeros of `shape`.
    pub fn accumulate(&mut self, inputs: &[Var], shape: &[usize]) -> Result<Var> {
        let mut out = Tensor::zeros(shape);
        for &v in inputs {
            same_shape("accumulate", &out, self.value(v))?;
            for (o, x) in out.data.iter_mut().zip(&self.value(v).data) {
                *o += x;
            }
        }
        let rg = inputs.iter().any(|&v| self.requires(v));
        self.push(out, Op::Accumulate(inputs.to_vec()), rg, "accumulate")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    /// Summed binary cross-entropy of probabilities `p` (one per row) against
    /// 0/1 `labels`, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce_sum(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != labels.len() {
            return Err(Error::Argument("bce: probability/label count mismatch".into()));
        }
        let loss = tp
            .data
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let rg = self.requires(p);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            rg,
            "bce",
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (&n.op, g) {
                    (Op::Leaf, Some(g)) if n.requires_grad => {
                        if g.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NumericalFault { op: "backward" });
                        }
                        Ok(Some(g))
                    }
                    _ => Ok(None),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let req = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = node.value.shape[1];
                if req(*a) {
                    // dA = dC · op(B)ᵀ
                    let ga = acc(grads, *a, m * k);
                    gemm((m, n, k), g, false, &tb.data, !transpose_b, ga, 1.0);
                }
                if req(*b) {
                    let gb = acc(grads, *b, tb.numel());
                    if *transpose_b {
                        // C = A Bᵀ, B is n x k: dB = dCᵀ · A
                        gemm((n, m, k), g, true, &ta.data, false, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm((k, m, n), &ta.data, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
                if req(*x) {
                    gemm((m, n, k), g, false, &tw.data, false, acc(grads, *x, m * k), 1.0);
                }
                if req(*w) {
                    gemm((n, m, k), g, true, &tx.data, false, acc(grads, *w, n * k), 1.0);
                }
                if req(*b) {
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::GruSequence(tr) => self.backprop_gru(tr, g, grads),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if req(*a) {
                    acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if req(*b) {
                    acc(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if req(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *d += s * y;
                    }
                }
                if req(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let c = node.value.cols();
                if req(*x) {
                    acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if req(*b) {
                    let gb = acc(grads, *b, c);
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(x, alpha) => {
                if req(*x) {
                    acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += alpha * s);
                }
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let c = tx.cols().max(1);
                if req(*x) {
                    let gx = acc(grads, *x, g.len());
                    for ((drow, grow), f) in gx.chunks_mut(c).zip(g.chunks(c)).zip(&ts.data) {
                        drow.iter_mut().zip(grow).for_each(|(d, v)| *d += f * v);
                    }
                }
                if req(*s) {
                    let gs = acc(grads, *s, ts.numel());
                    for ((d, grow), xrow) in gs.iter_mut().zip(g.chunks(c)).zip(tx.data.chunks(c)) {
                        *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MulConst(x, mask) => {
                if req(*x) {
                    let gx = acc(grads, *x, g.len());
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Unary(x, f) => {
                if req(*x) {
                    let tx = val(*x);
                    let gx = acc(grads, *x, g.len());
                    for (((d, s), xi), yi) in gx.iter_mut().zip(g).zip(&tx.data).zip(&node.value.data) {
                        *d += s * f.derivative(*xi, *yi);
                    }
                }
            }
            Op::Softmax(x) => {
                if req(*x) {
                    let c = node.value.cols();
                    let gx = acc(grads, *x, g.len());
                    for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                let r = node.value.rows();
                if req(*a) {
                    let ga = acc(grads, *a, r * p);
                    for i in 0..r {
                        for j in 0..p {
                            ga[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                if req(*b) {
                    let gb = acc(grads, *b, r * q);
                    for i in 0..r {
                        for j in 0..q {
                            gb[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if req(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = acc(grads, *x, tx.numel());
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                if req(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let len = node.value.cols();
                    let gx = acc(grads, *x, tx.numel());
                    for (i, grow) in g.chunks(len.max(1)).enumerate() {
                        gx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if req(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = acc(grads, *x, tx.numel());
                    for (i, &j) in index.iter().enumerate() {
                        gx[j * c..(j + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ScatterAddRows { x, index } => {
                if req(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = acc(grads, *x, tx.numel());
                    for (i, &j) in index.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[j * c..(j + 1) * c])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::MaxPool { inputs, argmax } => {
                for (step, &v) in inputs.iter().enumerate() {
                    if !req(v) {
                        continue;
                    }
                    let n = val(v).numel();
                    let gv = acc(grads, v, n);
                    // row i of a step lines up with output row i
                    for k in 0..n {
                        if argmax[k] as usize == step {
                            gv[k] += g[k];
                        }
                    }
                }
            }
            Op::Accumulate(inputs) => {
                for &v in inputs {
                    if req(v) {
                        acc(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SumAll(x) => {
                if req(*x) {
                    let n = val(*x).numel();
                    acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Bce { p, labels, eps } => {
                if req(*p) {
                    let tp = val(*p);
                    let gp = acc(grads, *p, tp.numel());
                    for ((d, &pv), &y) in gp.iter_mut().zip(&tp.data).zip(labels) {
                        if pv > *eps && pv < 1.0 - eps {
                            *d += g[0] * (-(y / pv) + (1.0 - y) / (1.0 - pv));
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    fn backprop_gru(&self, tr: &GruTrace, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let req = |v: Var| self.nodes[v.0].requires_grad;
        let hd = val(tr.recur[0]).rows();
        let steps = &tr.steps;
        let total: usize = steps.iter().sum();
        let offsets: Vec<usize> = steps
            .iter()
            .scan(0, |acc, &k| {
                let o = *acc;
                *acc += k;
                Some(o)
            })
            .collect();
        let (ur, uu, un) = (&val(tr.recur[0]).data, &val(tr.recur[1]).data, &val(tr.recur[2]).data);

        // gradient reaching each packed state: pooled part now, recurrent part below
        let mut dh = vec![0.0; total * hd];
        for (e, &row) in tr.argmax.iter().enumerate() {
            dh[row as usize * hd + e % hd] += g[e];
        }
        let mut du_mats = [vec![0.0; hd * hd], vec![0.0; hd * hd], vec![0.0; hd * hd]];
        let cap = steps[0] * hd;
        let (mut dpr, mut dpu, mut dpn) = (vec![0.0; cap], vec![0.0; cap], vec![0.0; cap]);
        let (mut drh, mut rh, mut dhp) = (vec![0.0; cap], vec![0.0; cap], vec![0.0; cap]);
        let zeros = vec![0.0; cap];
        for t in (0..steps.len()).rev() {
            let (k, off) = (steps[t], offsets[t]);
            let kk = k * hd;
            let hp: &[f64] = if t == 0 {
                &zeros[..kk]
            } else {
                &tr.h[offsets[t - 1] * hd..offsets[t - 1] * hd + kk]
            };
            let base = off * hd;
            for j in 0..kk {
                let i = base + j;
                let (r, u, n) = (tr.r[i], tr.u[i], tr.n[i]);
                let gh = dh[i];
                let dn = gh * (1.0 - u);
                dhp[j] = gh * u;
                dpn[j] = dn * (1.0 - n * n);
                dpu[j] = gh * (hp[j] - n) * u * (1.0 - u);
                rh[j] = r * hp[j];
            }
            gemm((k, hd, hd), &dpn[..kk], false, un, false, &mut drh[..kk], 0.0);
            for j in 0..kk {
                let r = tr.r[base + j];
                dpr[j] = drh[j] * hp[j] * r * (1.0 - r);
                dhp[j] += drh[j] * r;
            }
            if t > 0 {
                gemm((k, hd, hd), &dpu[..kk], false, uu, false, &mut dhp[..kk], 1.0);
                gemm((k, hd, hd), &dpr[..kk], false, ur, false, &mut dhp[..kk], 1.0);
                gemm((hd, k, hd), &dpr[..kk], true, hp, false, &mut du_mats[0], 1.0);
                gemm((hd, k, hd), &dpu[..kk], true, hp, false, &mut du_mats[1], 1.0);
                gemm((hd, k, hd), &dpn[..kk], true, &rh[..kk], false, &mut du_mats[2], 1.0);
                let pbase = offsets[t - 1] * hd;
                dh[pbase..pbase + kk]
                    .iter_mut()
                    .zip(&dhp[..kk])
                    .for_each(|(d, s)| *d += s);
            }
            for (gate, dp) in tr.gates.iter().zip([&dpr, &dpu, &dpn]) {
                if req(*gate) {
                    acc(grads, *gate, total * hd)[base..base + kk]
                        .iter_mut()
                        .zip(&dp[..kk])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        for (m, d) in tr.recur.iter().zip(du_mats) {
            if req(*m) {
                acc(grads, *m, hd * hd).iter_mut().zip(d).for_each(|(a, s)| *a += s);
            }
        }
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
