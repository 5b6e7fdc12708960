// Wengert tape: every op appends a node holding its forward value; backward
// walks the nodes in reverse creation order, which is a topological order.
//
// Tensors are row-major. Row-wise ops (softmax, layer norm, slicing) view a
// tensor as [rows, cols] with cols = the last extent.

use crate::broadcast::{broadcast_shape, Pattern};
use crate::error::{Result, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Square,
    Sqrt,
    Softplus,
    Sin,
    Cos,
}

/// Counters for numerically suspicious events seen while evaluating a tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// non-finite results produced by `div`, `log` or `sqrt`
    pub non_finite: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Binary { op: BinaryOp, a: usize, b: usize, pa: Pattern, pb: Pattern },
    Unary { op: UnaryOp, x: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    ClampMin { x: usize, floor: f64 },
    Sum { x: usize },
    SumLast { x: usize, cols: usize },
    SumRows { x: usize, cols: usize },
    Softmax { x: usize, cols: usize },
    LayerNorm { x: usize, cols: usize, inv_std: Vec<f64> },
    SliceCols { x: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    ConcatRows { parts: Vec<usize> },
    GatherRows { x: usize, cols: usize, idx: Vec<usize> },
    RotatePairs { x: usize, angle: usize },
    PairSum { x: usize },
    Reshape { x: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
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

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    // ── Leaves ────────────────────────────────────────────────────────

    /// Creates a leaf node after validating that `values` fills `shape`.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape.to_vec()));
        }
        if numel(shape) != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: values.len(),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.push(vec![1], vec![c], Op::Leaf, false)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    // ── Accessors ─────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── Linear algebra ────────────────────────────────────────────────

    /// `a[m,k] × b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] × b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), bs, &mut out, 0.0);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n, trans_b }, rg))
    }

    // ── Element-wise ──────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let pa = Pattern::new(&sa, &shape);
        let pb = Pattern::new(&sb, &shape);
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let out: Vec<f64> = match (&pa, &pb) {
            (Pattern::Identity, Pattern::Identity) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(va[pa.index(i)], vb[pb.index(i)])).collect(),
        };
        if op == BinaryOp::Div {
            self.count_non_finite(&out);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Binary { op, a: a.0, b: b.0, pa, pb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Softplus => softplus,
            UnaryOp::Sin => f64::sin,
            UnaryOp::Cos => f64::cos,
        };
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        if matches!(op, UnaryOp::Log | UnaryOp::Sqrt) {
            self.count_non_finite(&out);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::Unary { op, x: x.0 }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sin, x)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Cos, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::AddScalar { x: x.0 }, rg)
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(floor)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::ClampMin { x: x.0, floor }, rg)
    }

    // ── Reductions ────────────────────────────────────────────────────

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let cols = last_dim(self.shape(x));
        let out = self.value(x).chunks(cols).map(|r| r.iter().sum()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(x.0);
        self.push(shape, out, Op::SumLast { x: x.0, cols }, rg)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let cols = last_dim(self.shape(x)) as f64;
        let s = self.sum_last(x);
        self.scale(s, 1.0 / cols)
    }

    /// Sums over rows of a `[rows, cols]` view, giving `[1, cols]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let cols = last_dim(self.shape(x));
        let mut out = vec![0.0; cols];
        for row in self.value(x).chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(x.0);
        self.push(vec![1, cols], out, Op::SumRows { x: x.0, cols }, rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.value(x).len() / last_dim(self.shape(x));
        let s = self.sum_rows(x);
        self.scale(s, 1.0 / rows as f64)
    }

    // ── Row-wise transforms ───────────────────────────────────────────

    /// Softmax over the last axis with max subtraction. Entries equal to
    /// `-inf` receive exactly zero weight.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let cols = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::Softmax { x: x.0, cols }, rg)
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let cols = last_dim(self.shape(x));
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, out, Op::LayerNorm { x: x.0, cols, inv_std }, rg)
    }

    // ── Structural ────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = last_dim(&shape);
        if len == 0 || start + len > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {shape:?}", start + len),
            });
        }
        let out: Vec<f64> =
            self.value(x).chunks(cols).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let rg = self.rg(x.0);
        Ok(self.push(new_shape, out, Op::SliceCols { x: x.0, cols, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid { op: "concat_cols", msg: "no inputs".into() })?;
        let rows = self.value(*first).len() / last_dim(self.shape(*first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let w = last_dim(s);
            if self.value(p).len() / w != rows || s.len() != self.shape(*first).len() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(*first).to_vec();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        let parts = parts.iter().zip(widths).map(|(p, w)| (p.0, w)).collect();
        Ok(self.push(shape, out, Op::ConcatCols { parts }, rg))
    }

    /// Stacks `[r_i, cols]` inputs into `[Σ r_i, cols]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid { op: "concat_rows", msg: "no inputs".into() })?;
        let cols = last_dim(self.shape(*first));
        let mut out = Vec::new();
        for &p in parts {
            if last_dim(self.shape(p)) != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        let rg = parts.iter().any(|p| self.rg(p.0));
        let parts = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let cols = last_dim(self.shape(x));
        let rows = self.value(x).len() / cols;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("indices {idx:?} invalid for {rows} rows"),
            });
        }
        let v = self.value(x);
        let out = idx.iter().flat_map(|&i| v[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(x.0);
        Ok(self.push(vec![idx.len(), cols], out, Op::GatherRows { x: x.0, cols, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x: x.0 }, rg))
    }

    /// Rotates each consecutive pair `(x[2j], x[2j+1])` of every row by
    /// `angle[row, j]`. `x` is `[rows, 2P]`, `angle` is `[rows, P]`.
    pub fn rotate_pairs(&mut self, x: Var, angle: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x).to_vec(), self.shape(angle).to_vec());
        let cols = last_dim(&sx);
        let rows = self.value(x).len() / cols;
        if cols % 2 != 0 || last_dim(&sa) * 2 != cols || self.value(angle).len() / last_dim(&sa) != rows {
            return Err(TensorError::ShapeMismatch { op: "rotate_pairs", lhs: sx, rhs: sa });
        }
        let (vx, va) = (self.value(x), self.value(angle));
        let mut out = vec![0.0; vx.len()];
        for (p, &a) in va.iter().enumerate() {
            let (s, c) = a.sin_cos();
            let (x0, x1) = (vx[2 * p], vx[2 * p + 1]);
            out[2 * p] = x0 * c - x1 * s;
            out[2 * p + 1] = x0 * s + x1 * c;
        }
        let rg = self.rg(x.0) || self.rg(angle.0);
        Ok(self.push(sx, out, Op::RotatePairs { x: x.0, angle: angle.0 }, rg))
    }

    /// `y[.., j] = x[.., 2j] + x[.., 2j+1]`.
    pub fn pair_sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if last_dim(&shape) % 2 != 0 {
            return Err(TensorError::Invalid { op: "pair_sum", msg: format!("odd last extent in {shape:?}") });
        }
        let out = self.value(x).chunks(2).map(|p| p[0] + p[1]).collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() /= 2;
        let rg = self.rg(x.0);
        Ok(self.push(new_shape, out, Op::PairSum { x: x.0 }, rg))
    }

    fn count_non_finite(&mut self, out: &[f64]) {
        self.diagnostics.non_finite += out.iter().filter(|v| !v.is_finite()).count() as u64;
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let need = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                if need(a) {
                    let da = slot(adj, a, m * k);
                    // dA = dC · B   (trans_b)   or   dC · Bᵀ
                    let bs = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    gemm(m, n, k, g, (n as isize, 1), vb, bs, da, 1.0);
                }
                if need(b) {
                    let db = slot(adj, b, k * n);
                    if trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, g, (1, n as isize), va, (k as isize, 1), db, 1.0);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), db, 1.0);
                    }
                }
            }
            Op::Binary { op, a, b, pa, pb } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                if need(a) {
                    let da = slot(adj, a, va.len());
                    for (idx, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (pa.index(idx), pb.index(idx));
                        da[ia] += match op {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * vb[ib],
                            BinaryOp::Div => gi / vb[ib],
                        };
                    }
                }
                if need(b) {
                    let db = slot(adj, b, vb.len());
                    for (idx, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (pa.index(idx), pb.index(idx));
                        db[ib] += match op {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * va[ia],
                            BinaryOp::Div => -gi * va[ia] / (vb[ib] * vb[ib]),
                        };
                    }
                }
            }
            &Op::Unary { op, x } => {
                if !need(x) {
                    return;
                }
                let (vx, y) = (&nodes[x].value, &node.value);
                let dx = slot(adj, x, vx.len());
                for j in 0..g.len() {
                    let d = match op {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Exp => y[j],
                        UnaryOp::Log => 1.0 / vx[j],
                        UnaryOp::Tanh => 1.0 - y[j] * y[j],
                        UnaryOp::Square => 2.0 * vx[j],
                        UnaryOp::Sqrt => 0.5 / y[j],
                        UnaryOp::Softplus => sigmoid(vx[j]),
                        UnaryOp::Sin => vx[j].cos(),
                        UnaryOp::Cos => -vx[j].sin(),
                    };
                    dx[j] += g[j] * d;
                }
            }
            &Op::Scale { x, c } => {
                if need(x) {
                    let dx = slot(adj, x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if need(x) {
                    let dx = slot(adj, x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            &Op::ClampMin { x, floor } => {
                if need(x) {
                    let vx = &nodes[x].value;
                    let dx = slot(adj, x, g.len());
                    for j in 0..g.len() {
                        if vx[j] > floor {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::SumLast { x, cols } => {
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    for (row, &gi) in dx.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            &Op::SumRows { x, cols } => {
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    for row in dx.chunks_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if need(x) {
                    let dx = slot(adj, x, g.len());
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(node.value.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, cols, inv_std } => {
                let (x, cols) = (*x, *cols);
                if need(x) {
                    let dx = slot(adj, x, g.len());
                    let n = cols as f64;
                    for (r, ((drow, yrow), grow)) in
                        dx.chunks_mut(cols).zip(node.value.chunks(cols)).zip(g.chunks(cols)).enumerate()
                    {
                        let mean_g = grow.iter().sum::<f64>() / n;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            drow[j] += inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                }
            }
            &Op::SliceCols { x, cols, start, len } => {
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(len)) {
                        drow[start..start + len].iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if need(p) {
                        let dp = slot(adj, p, nodes[p].value.len());
                        for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            drow.iter_mut().zip(&grow[offset..offset + w]).for_each(|(d, gi)| *d += gi);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if need(p) {
                        let dp = slot(adj, p, len);
                        dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, gi)| *d += gi);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, cols, idx } => {
                let (x, cols) = (*x, *cols);
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    for (k, &r) in idx.iter().enumerate() {
                        dx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            &Op::RotatePairs { x, angle } => {
                let va = &nodes[angle].value;
                if need(x) {
                    let dx = slot(adj, x, g.len());
                    for (p, &a) in va.iter().enumerate() {
                        let (s, c) = a.sin_cos();
                        let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                        dx[2 * p] += g0 * c + g1 * s;
                        dx[2 * p + 1] += -g0 * s + g1 * c;
                    }
                }
                if need(angle) {
                    let y = &node.value;
                    let dang = slot(adj, angle, va.len());
                    for p in 0..va.len() {
                        dang[p] += -g[2 * p] * y[2 * p + 1] + g[2 * p + 1] * y[2 * p];
                    }
                }
            }
            &Op::PairSum { x } => {
                if need(x) {
                    let dx = slot(adj, x, nodes[x].value.len());
                    for (j, &gi) in g.iter().enumerate() {
                        dx[2 * j] += gi;
                        dx[2 * j + 1] += gi;
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = a·b + beta·c` for row/column-strided operands; `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
