//! Tape graph: every op appends a node, so creation order is a valid
//! topological order and backward is a single reverse sweep.

use crate::error::{mismatch, Result, TensorError};
use crate::kernels;
use crate::tensor::{global_precision, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Silu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Bin, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    RowNorms(Var),
    Expand(Var),
    Conv1d(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ReverseRows(Var),
    DiagScan(Var, Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Bin::Add, ..) => "add",
            Op::Binary(Bin::Sub, ..) => "sub",
            Op::Binary(Bin::Mul, ..) => "mul",
            Op::Binary(Bin::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(u, _) => match u {
                Unary::Sigmoid => "sigmoid",
                Unary::Silu => "silu",
                Unary::Tanh => "tanh",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Softplus => "softplus",
                Unary::Relu => "relu",
            },
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::NormalizeRows(..) => "l2norm",
            Op::RowNorms(..) => "row_norms",
            Op::Expand(..) => "expand",
            Op::Conv1d(..) => "conv1d",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ReverseRows(..) => "reverse_rows",
            Op::DiagScan(..) => "diag_scan",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and interior nodes.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn lanes(m: usize, n: usize, axis: usize) -> (usize, usize, usize, usize) {
    // (lane count, lane length, base step, element stride)
    if axis == 1 {
        (m, n, n, 1)
    } else {
        (n, m, 1, n)
    }
}

impl Graph {
    /// New graph using the engine-wide precision.
    pub fn new() -> Graph {
        Graph::with_precision(global_precision())
    }

    pub fn with_precision(precision: Precision) -> Graph {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let d = self.dims(v);
        if d.len() != 2 {
            return Err(mismatch(op, format!("expected a matrix, got {d:?}")));
        }
        Ok((d[0], d[1]))
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let mut t = t;
        self.precision.round_slice(t.data_mut());
        let t = Tensor::raw(t.dims().to_vec(), t.to_vec(), self.precision);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, dims: Vec<usize>, mut data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { op: op.name() });
        }
        self.precision.round_slice(&mut data);
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::raw(dims, data, self.precision),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::Conv1d(a, b) | Op::DiagScan(a, b) => {
                vec![*a, *b]
            }
            Op::ScatterRows(a, b, _) => vec![*a, *b],
            Op::AddScalar(a) => vec![*a],
            Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::Softmax(a, _)
            | Op::LogSumExp(a, _)
            | Op::NormalizeRows(a, _)
            | Op::RowNorms(a)
            | Op::Expand(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::ReverseRows(a) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::LayerNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
        }
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let (x, y) = (self.data(a), self.data(b));
        let f = |p: f64, q: f64| match kind {
            Bin::Add => p + q,
            Bin::Sub => p - q,
            Bin::Mul => p * q,
            Bin::Div => p / q,
        };
        let (dims, out): (Vec<usize>, Vec<f64>) = if da == db {
            (da, x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        } else if y.len() == 1 {
            (da, x.iter().map(|&p| f(p, y[0])).collect())
        } else if x.len() == 1 {
            (db, y.iter().map(|&q| f(x[0], q)).collect())
        } else {
            let name = Op::Binary(kind, a, b).name();
            return Err(mismatch(name, format!("{da:?} vs {db:?}")));
        };
        self.push(dims, out, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|v| v * c).collect();
        self.push(self.dims(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|v| v + c).collect();
        self.push(self.dims(a).to_vec(), out, Op::AddScalar(a))
    }

    fn unary(&mut self, u: Unary, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match u {
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Silu => |x| x * kernels::sigmoid(x),
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => kernels::softplus,
            Unary::Relu => |x| x.max(0.0),
        };
        let out = self.data(a).iter().map(|&v| f(v)).collect();
        self.push(self.dims(a).to_vec(), out, Op::Unary(u, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = kernels::transpose(self.data(a), m, n);
        self.push(vec![n, m], out, Op::Transpose(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![1, 1], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push(vec![1, 1], vec![s], Op::MeanAll(a))
    }

    fn reduce_dims(&self, a: Var, axis: usize, op: &'static str) -> Result<(usize, usize, Vec<usize>)> {
        let (m, n) = self.mat(a, op)?;
        match axis {
            0 => Ok((m, n, vec![1, n])),
            1 => Ok((m, n, vec![m, 1])),
            _ => Err(mismatch(op, format!("axis {axis} out of range"))),
        }
    }

    /// Sum over `axis` (0 collapses rows, 1 collapses columns), keeping rank 2.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n, dims) = self.reduce_dims(a, axis, "sum_axis")?;
        let x = self.data(a);
        let (cnt, len, step, stride) = lanes(m, n, axis);
        let out = (0..cnt)
            .map(|i| (0..len).map(|j| x[i * step + j * stride]).sum())
            .collect();
        self.push(dims, out, Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n, dims) = self.reduce_dims(a, axis, "mean_axis")?;
        let x = self.data(a);
        let (cnt, len, step, stride) = lanes(m, n, axis);
        let out = (0..cnt)
            .map(|i| (0..len).map(|j| x[i * step + j * stride]).sum::<f64>() / len as f64)
            .collect();
        self.push(dims, out, Op::MeanAxis(a, axis))
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n, dims) = self.reduce_dims(a, axis, "max_axis")?;
        let x = self.data(a);
        let (cnt, len, step, stride) = lanes(m, n, axis);
        let mut arg = Vec::with_capacity(cnt);
        let mut out = Vec::with_capacity(cnt);
        for i in 0..cnt {
            let mut best = i * step;
            for j in 1..len {
                let p = i * step + j * stride;
                if x[p] > x[best] {
                    best = p;
                }
            }
            arg.push(best);
            out.push(x[best]);
        }
        self.push(dims, out, Op::MaxAxis(a, arg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n, _) = self.reduce_dims(a, axis, "softmax")?;
        let x = self.data(a);
        let (cnt, len, step, stride) = lanes(m, n, axis);
        let mut out = vec![0.0; x.len()];
        for i in 0..cnt {
            let idx = |j: usize| i * step + j * stride;
            let mx = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (x[idx(j)] - mx).exp()).sum();
            for j in 0..len {
                out[idx(j)] = (x[idx(j)] - mx).exp() / z;
            }
        }
        self.push(vec![m, n], out, Op::Softmax(a, axis))
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n, dims) = self.reduce_dims(a, axis, "logsumexp")?;
        let x = self.data(a);
        let (cnt, len, step, stride) = lanes(m, n, axis);
        let out = (0..cnt)
            .map(|i| {
                let v: Vec<f64> = (0..len).map(|j| x[i * step + j * stride]).collect();
                kernels::logsumexp(&v)
            })
            .collect();
        self.push(dims, out, Op::LogSumExp(a, axis))
    }

    // ---- row geometry ----

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "l2norm")?;
        let x = self.data(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(nr);
            if nr > 0.0 {
                for c in 0..n {
                    out[r * n + c] = row[c] / nr;
                }
            }
        }
        self.push(vec![m, n], out, Op::NormalizeRows(a, norms))
    }

    /// Euclidean norm of each row as an m×1 column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "row_norms")?;
        let x = self.data(a);
        let out = (0..m)
            .map(|r| x[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(vec![m, 1], out, Op::RowNorms(a))
    }

    /// Row-wise cosine similarity of two equally shaped matrices (m×1).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        let p = self.mul(an, bn)?;
        self.sum_axis(p, 1)
    }

    /// Repeats a 1×1, m×1 or 1×n operand to `dims`.
    pub fn expand(&mut self, a: Var, dims: [usize; 2]) -> Result<Var> {
        let (sm, sn) = self.mat(a, "expand")?;
        let [m, n] = dims;
        if !((sm == m || sm == 1) && (sn == n || sn == 1)) || m == 0 || n == 0 {
            return Err(mismatch("expand", format!("{sm}x{sn} -> {m}x{n}")));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let si = if sm == 1 { 0 } else { i };
            for j in 0..n {
                out.push(x[si * sn + if sn == 1 { 0 } else { j }]);
            }
        }
        self.push(vec![m, n], out, Op::Expand(a))
    }

    // ---- sequence ops ----

    /// Depthwise 1-D convolution over rows with zero same-padding.
    /// `x` is L×d, `kernel` is d×k with odd k.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (l, d) = self.mat(x, "conv1d")?;
        let (d2, k) = self.mat(kernel, "conv1d")?;
        if d != d2 || k % 2 == 0 {
            return Err(mismatch("conv1d", format!("x {l}x{d}, kernel {d2}x{k} (k must be odd)")));
        }
        let out = kernels::conv1d(self.data(x), self.data(kernel), l, d, k);
        self.push(vec![l, d], out, Op::Conv1d(x, kernel))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(a, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(mismatch("gather_rows", format!("indices out of range for {m} rows")));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(vec![idx.len(), n], out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], base: Var) -> Result<Var> {
        let (k, n) = self.mat(src, "scatter_rows")?;
        let (m, n2) = self.mat(base, "scatter_rows")?;
        let mut seen = vec![false; m];
        let ok = n == n2
            && k == idx.len()
            && idx.iter().all(|&i| i < m && !std::mem::replace(&mut seen[i], true));
        if !ok {
            return Err(mismatch("scatter_rows", format!("src {k}x{n}, base {m}x{n2}, {} indices", idx.len())));
        }
        let mut out = self.data(base).to_vec();
        let s = self.data(src);
        for (r, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&s[r * n..(r + 1) * n]);
        }
        self.push(vec![m, n], out, Op::ScatterRows(src, base, idx.to_vec()))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {m}")));
        }
        let out = self.data(a)[start * n..end * n].to_vec();
        self.push(vec![end - start, n], out, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no inputs"));
        }
        let (_, n) = self.mat(parts[0], "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_rows")?;
            if pn != n {
                return Err(mismatch("concat_rows", format!("column counts {n} vs {pn}")));
            }
            m += pm;
            out.extend_from_slice(self.data(p));
        }
        self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no inputs"));
        }
        let (m, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::new();
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(mismatch("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "reverse_rows")?;
        let x = self.data(a);
        let mut out = Vec::with_capacity(m * n);
        for r in (0..m).rev() {
            out.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        self.push(vec![m, n], out, Op::ReverseRows(a))
    }

    /// Diagonal linear recurrence `h_t = a ⊙ h_{t-1} + v_t`, `h_{-1} = 0`.
    /// `v` is L×N, `a` is 1×N.
    pub fn diag_scan(&mut self, v: Var, a: Var) -> Result<Var> {
        let (l, n) = self.mat(v, "diag_scan")?;
        let (one, n2) = self.mat(a, "diag_scan")?;
        if one != 1 || n2 != n {
            return Err(mismatch("diag_scan", format!("v {l}x{n}, a {one}x{n2}")));
        }
        let out = kernels::diag_scan(self.data(v), self.data(a), l, n);
        self.push(vec![l, n], out, Op::DiagScan(v, a))
    }

    /// Per-row layer norm with 1×n scale and shift.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        if self.dims(scale) != [1, n] || self.dims(shift) != [1, n] {
            return Err(mismatch("layer_norm", format!("scale/shift must be 1x{n}")));
        }
        let xv = self.data(x);
        let (g, b) = (self.data(scale), self.data(shift));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.push(vec![m, n], out, Op::LayerNorm { x, scale, shift, xhat, rstd })
    }

    // ---- backward ----

    /// Reverse sweep from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(loss.0));
        }
        let ld = self.dims(loss);
        if ld.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ld.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let dims = node.value.dims().to_vec();
                let mut data = grads
                    .get_mut(i)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                self.precision.round_slice(&mut data);
                out.push(Some(Tensor::raw(dims, data, self.precision)));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (x, z) = (self.data(*a), self.data(*b));
                let (xl, zl) = (x.len(), z.len());
                let n = g.len();
                let xi = |k: usize| if xl == 1 { 0 } else { k };
                let zi = |k: usize| if zl == 1 { 0 } else { k };
                if needs(*a) {
                    acc(*a, &mut |s| {
                        for k in 0..n {
                            let d = match kind {
                                Bin::Add | Bin::Sub => g[k],
                                Bin::Mul => g[k] * z[zi(k)],
                                Bin::Div => g[k] / z[zi(k)],
                            };
                            s[xi(k)] += d;
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |s| {
                        for k in 0..n {
                            let d = match kind {
                                Bin::Add => g[k],
                                Bin::Sub => -g[k],
                                Bin::Mul => g[k] * x[xi(k)],
                                Bin::Div => -g[k] * x[xi(k)] / (z[zi(k)] * z[zi(k)]),
                            };
                            s[zi(k)] += d;
                        }
                    });
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (sk, gk) in s.iter_mut().zip(g) {
                    *sk += gk * c;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| {
                for (sk, gk) in s.iter_mut().zip(g) {
                    *sk += gk;
                }
            }),
            Op::Unary(u, a) => {
                let x = self.data(*a);
                acc(*a, &mut |s| {
                    for k in 0..g.len() {
                        let d = match u {
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Silu => {
                                let sg = kernels::sigmoid(x[k]);
                                sg * (1.0 + x[k] * (1.0 - sg))
                            }
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / x[k],
                            Unary::Softplus => kernels::sigmoid(x[k]),
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if needs(*a) {
                    // dA = G · Bᵀ
                    let bt = kernels::transpose(self.data(*b), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    acc(*a, &mut |s| kernels::add_into(s, &da));
                }
                if needs(*b) {
                    let at = kernels::transpose(self.data(*a), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    acc(*b, &mut |s| kernels::add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                let gt = kernels::transpose(g, n, m);
                acc(*a, &mut |s| kernels::add_into(s, &gt));
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(a) => {
                let n = self.data(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                let (cnt, len, step, stride) = lanes(m, n, *axis);
                let div = if matches!(node.op, Op::MeanAxis(..)) { len as f64 } else { 1.0 };
                acc(*a, &mut |s| {
                    for i in 0..cnt {
                        for j in 0..len {
                            s[i * step + j * stride] += g[i] / div;
                        }
                    }
                });
            }
            Op::MaxAxis(a, arg) => acc(*a, &mut |s| {
                for (i, &p) in arg.iter().enumerate() {
                    s[p] += g[i];
                }
            }),
            Op::Softmax(a, axis) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                let (cnt, len, step, stride) = lanes(m, n, *axis);
                acc(*a, &mut |s| {
                    for i in 0..cnt {
                        let idx = |j: usize| i * step + j * stride;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                let x = self.data(*a);
                let (cnt, len, step, stride) = lanes(m, n, *axis);
                acc(*a, &mut |s| {
                    for i in 0..cnt {
                        for j in 0..len {
                            let p = i * step + j * stride;
                            s[p] += g[i] * (x[p] - y[i]).exp();
                        }
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                let n = self.dims(*a)[1];
                acc(*a, &mut |s| {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                        for c in row {
                            s[c] += (g[c] - y[c] * dot) / nr;
                        }
                    }
                });
            }
            Op::RowNorms(a) => {
                let n = self.dims(*a)[1];
                let x = self.data(*a);
                acc(*a, &mut |s| {
                    for (r, &nr) in y.iter().enumerate() {
                        if nr > 0.0 {
                            for c in r * n..(r + 1) * n {
                                s[c] += g[r] * x[c] / nr;
                            }
                        }
                    }
                });
            }
            Op::Expand(a) => {
                let (sm, sn) = (self.dims(*a)[0], self.dims(*a)[1]);
                let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let si = if sm == 1 { 0 } else { i };
                        for j in 0..n {
                            s[si * sn + if sn == 1 { 0 } else { j }] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Conv1d(x, kern) => {
                let (l, d) = (self.dims(*x)[0], self.dims(*x)[1]);
                let k = self.dims(*kern)[1];
                let (dx, dk) = kernels::conv1d_backward(self.data(*x), self.data(*kern), g, l, d, k);
                acc(*x, &mut |s| kernels::add_into(s, &dx));
                acc(*kern, &mut |s| kernels::add_into(s, &dk));
            }
            Op::GatherRows(a, idx) => {
                let n = self.dims(*a)[1];
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[i * n + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::ScatterRows(src, base, idx) => {
                let n = self.dims(*base)[1];
                acc(*src, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[r * n + c] += g[i * n + c];
                        }
                    }
                });
                acc(*base, &mut |s| {
                    let mut mask = vec![true; self.dims(*base)[0]];
                    idx.iter().for_each(|&i| mask[i] = false);
                    for (i, keep) in mask.into_iter().enumerate() {
                        if keep {
                            for c in 0..n {
                                s[i * n + c] += g[i * n + c];
                            }
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.dims(*a)[1];
                acc(*a, &mut |s| kernels::add_into(&mut s[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    acc(p, &mut |s| kernels::add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p)[1];
                    acc(p, &mut |s| {
                        for r in 0..m {
                            kernels::add_into(&mut s[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::ReverseRows(a) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let src = (m - 1 - r) * n;
                        kernels::add_into(&mut s[r * n..(r + 1) * n], &g[src..src + n]);
                    }
                });
            }
            Op::DiagScan(v, a) => {
                let (l, n) = (self.dims(*v)[0], self.dims(*v)[1]);
                let (dv, da) = kernels::diag_scan_backward(y, self.data(*a), g, l, n);
                acc(*v, &mut |s| kernels::add_into(s, &dv));
                acc(*a, &mut |s| kernels::add_into(s, &da));
            }
            Op::LayerNorm { x, scale, shift, xhat, rstd } => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                let gamma = self.data(*scale);
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dh: Vec<f64> = row.clone().map(|p| g[p] * gamma[p - r * n]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhx = dh.iter().zip(&xhat[row.clone()]).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = rstd[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dhx);
                        }
                    }
                    acc(*x, &mut |s| kernels::add_into(s, &dx));
                }
                acc(*scale, &mut |s| {
                    for p in 0..m * n {
                        s[p % n] += g[p] * xhat[p];
                    }
                });
                acc(*shift, &mut |s| {
                    for p in 0..m * n {
                        s[p % n] += g[p];
                    }
                });
            }
        }
    }
}
