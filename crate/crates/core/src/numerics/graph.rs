//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every primitive pushes one node holding its output value and enough saved
//! state to run its backward rule. [`Graph::backward`] replays the record in
//! reverse, adding each leaf's adjoint into that leaf's `grad` buffer, so two
//! consecutive backward calls double every leaf gradient.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// a (m×k) times transpose of b (n×k).
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, bias: Var, cols: usize },
    ScaleBy { s: Var, x: Var },
    Scale(Var, f64),
    Shift(Var),
    Gather { x: Var, index: Vec<usize> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    ReplaceRows { x: Var, token: Var, masked: Vec<bool> },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, cols: usize },
    Unary(Var, Unary),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    MeanRows { x: Var, rows: usize, cols: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only operation record. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn as_matrix(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a tensor as a leaf; it collects gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (as_matrix(ta), as_matrix(tb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::dim("matmul", ta.shape(), tb.shape())),
        };
        debug_assert_eq!(k, k2);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), n) = match (as_matrix(ta), as_matrix(tb)) {
            (Some(x), Some(y)) if x.1 == y.1 => (x, y.0),
            _ => return Err(Error::dim("matmul_bt", ta.shape(), tb.shape())),
        };
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul_bt", t, Op::MatMulBt { a, b, m, k, n }, &[a, b])
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tx.shape().len() != 2 || tb.numel() != cols {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let out: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push("add_row", t, Op::AddRow { x, bias, cols }, &[x, bias])
    }

    /// `x·W + b` row-wise.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- elementwise ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        Ok(ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let t = Tensor::new(self.shape(a), out)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let t = Tensor::new(self.shape(a), out)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let t = Tensor::new(self.shape(a), out)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let t = Tensor::new(self.shape(a), out).map_err(|_| Error::NonFinite("div".into()))?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::dim("scale_by", ts.shape(), &[1]));
        }
        let sv = ts.item();
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push("scale_by", t, Op::ScaleBy { s, x }, &[s, x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push("shift", t, Op::Shift(x), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let tx = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| v.max(0.0),
            Unary::Gelu => gelu,
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
        };
        let out: Vec<f64> = tx.data().iter().map(|&v| f(v)).collect();
        check_finite(kind.name(), &out)?;
        let t = Tensor::new(tx.shape(), out)?;
        self.push(kind.name(), t, Op::Unary(x, kind), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(tx.shape(), out)?;
        self.push("clamp", t, Op::Clamp { x, lo, hi }, &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of an `n×d` matrix, returned as `1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix(tx).ok_or_else(|| Error::dim("mean_rows", tx.shape(), &[0, 0]))?;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let t = Tensor::new(&[1, cols], out)?;
        self.push("mean_rows", t, Op::MeanRows { x, rows, cols }, &[x])
    }

    // ---- structural ----

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Repeated indices broadcast;
    /// the backward rule scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.numel()) {
            return Err(Error::dim("gather", tx.shape(), &[bad]));
        }
        let d = tx.data();
        let out = index.iter().map(|&i| d[i]).collect();
        let t = Tensor::new(shape, out)?;
        self.push("gather", t, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        self.gather(x, (0..n).collect(), shape)
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix(tx).ok_or_else(|| Error::dim("slice_cols", tx.shape(), &[start, width]))?;
        if start + width > cols || width == 0 {
            return Err(Error::dim("slice_cols", tx.shape(), &[start, width]));
        }
        let index = (0..rows)
            .flat_map(|r| (start..start + width).map(move |c| r * cols + c))
            .collect();
        self.gather(x, index, &[rows, width])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = as_matrix(tx).ok_or_else(|| Error::dim("transpose", tx.shape(), &[0, 0]))?;
        let index = (0..cols)
            .flat_map(|c| (0..rows).map(move |r| r * cols + c))
            .collect();
        self.gather(x, index, &[cols, rows])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            match as_matrix(tp) {
                Some((r, c)) if r == rows => widths.push((p, c)),
                _ => return Err(Error::dim("concat_cols", first.shape(), tp.shape())),
            }
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, _) in &widths {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        self.push("concat_cols", t, Op::ConcatCols { parts: widths, rows }, parts)
    }

    /// Replaces the rows flagged in `masked` with `token` (length = columns).
    pub fn replace_rows(&mut self, x: Var, token: Var, masked: Vec<bool>) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(token));
        let cols = tx.cols();
        if tx.shape().len() != 2 || tt.numel() != cols || masked.len() != tx.rows() {
            return Err(Error::dim("replace_rows", tx.shape(), tt.shape()));
        }
        let mut out = tx.data().to_vec();
        for (r, &m) in masked.iter().enumerate() {
            if m {
                out[r * cols..(r + 1) * cols].copy_from_slice(tt.data());
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push("replace_rows", t, Op::ReplaceRows { x, token, masked }, &[x, token])
    }

    // ---- normalisation ----

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if tx.shape().is_empty() || cols == 0 {
            return Err(Error::dim("softmax", tx.shape(), &[1]));
        }
        let out = softmax_rows(tx.data(), cols);
        let t = Tensor::new(tx.shape(), out)?;
        self.push("softmax", t, Op::Softmax { x, cols }, &[x])
    }

    /// Per-row normalisation to zero mean and unit (population) variance,
    /// followed by `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tx.shape().len() != 2 || tg.numel() != cols || tb.numel() != cols {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd, cols };
        self.push("layer_norm", t, op, &[x, gamma, beta])
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let leaf = &mut self.nodes[i].value;
                match &mut leaf.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => leaf.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if needs(a) {
                    // dA = G · Bᵀ
                    acc(a, &mut |da| {
                        for r in 0..m {
                            for c in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[r * n + j] * bd[c * n + j];
                                }
                                da[r * k + c] += s;
                            }
                        }
                    });
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    acc(b, &mut |db| {
                        for r in 0..m {
                            for c in 0..k {
                                let av = ad[r * k + c];
                                if av == 0.0 {
                                    continue;
                                }
                                let gr = &g[r * n..(r + 1) * n];
                                let row = &mut db[c * n..(c + 1) * n];
                                for (o, gv) in row.iter_mut().zip(gr) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                // out[i,j] = Σ_c a[i,c] b[j,c]
                acc(a, &mut |da| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for c in 0..k {
                                da[r * k + c] += gv * bd[j * k + c];
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for c in 0..k {
                                db[j * k + c] += gv * ad[r * k + c];
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bd[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * ad[j];
                    }
                });
            }
            &Op::Div(a, b) => {
                let bd = self.data(b);
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / bd[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * out[j] / bd[j];
                    }
                });
            }
            &Op::AddRow { x, bias, cols } => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(bias, &mut |d| {
                    for (j, v) in g.iter().enumerate() {
                        d[j % cols] += v;
                    }
                });
            }
            &Op::ScaleBy { s, x } => {
                let sv = self.item(s);
                let xd = self.data(x);
                acc(s, &mut |d| d[0] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>());
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
            }
            &Op::Scale(x, c) => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            &Op::Shift(x) => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |d| {
                    for (gv, &src) in g.iter().zip(index) {
                        d[src] += gv;
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for r in 0..*rows {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ReplaceRows { x, token, masked } => {
                let cols = self.value(*x).cols();
                acc(*x, &mut |d| {
                    for (r, &m) in masked.iter().enumerate() {
                        if !m {
                            for c in 0..cols {
                                d[r * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                });
                acc(*token, &mut |d| {
                    for (r, &m) in masked.iter().enumerate() {
                        if m {
                            for c in 0..cols {
                                d[c] += g[r * cols + c];
                            }
                        }
                    }
                });
            }
            &Op::Softmax { x, cols } => {
                acc(x, &mut |d| {
                    for (row_g, (row_y, row_d)) in g
                        .chunks(cols)
                        .zip(out.chunks(cols).zip(d.chunks_mut(cols)))
                    {
                        let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            row_d[c] += row_y[c] * (row_g[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd, cols } => {
                let cols = *cols;
                let gd = self.data(*gamma);
                acc(*x, &mut |d| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[base + c] * gd[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + c];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for c in 0..cols {
                            let dh = g[base + c] * gd[c];
                            d[base + c] += rs * (dh - mean_dh - xhat[base + c] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv * xhat[j];
                    }
                });
                acc(*beta, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv;
                    }
                });
            }
            &Op::Unary(x, kind) => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        let dy = match kind {
                            Unary::Exp => out[j],
                            Unary::Log => 1.0 / xd[j],
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Relu => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(xd[j]),
                            Unary::Abs => {
                                if xd[j] > 0.0 {
                                    1.0
                                } else if xd[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xd[j],
                            Unary::Sqrt => 0.5 / out[j],
                        };
                        d[j] += g[j] * dy;
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xd = self.data(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        if xd[j] > lo && xd[j] < hi {
                            d[j] += g[j];
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                acc(x, &mut |d| d.iter_mut().for_each(|o| *o += g[0]));
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            &Op::MeanRows { x, rows, cols } => {
                acc(x, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}
