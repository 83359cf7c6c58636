//! Dense 2-D tensors and a tape-based reverse-mode differentiation graph.
//!
//! Every value the model touches is a `rows × cols` matrix of `f64`; column
//! vectors are `n × 1`. The [`Graph`] records primitive applications in
//! execution order, so the record order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::params::{ParamId, ParamStore};

/// Inputs whose Euclidean norm falls below this are normalized to zero.
pub const NORM_EPS: f64 = 1e-12;
/// Added under the square root in the signed-square-root derivative.
pub const SQRT_GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: {detail}")]
    Attr { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("graph holds dropout masks that were not frozen")]
    Nondeterministic,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape(), self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::Attr {
                op: "tensor",
                detail: format!("shape [{rows}, {cols}] needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    /// Column vector `n × 1`.
    pub fn column(values: Vec<f64>) -> Self {
        Self { rows: values.len(), cols: 1, data: values }
    }

    /// Row vector `1 × n`.
    pub fn row(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(TensorError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { rows: n, cols: p, data: out })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { rows: self.rows, cols: self.cols, data }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Attributes travel with the op so the tape can be
/// replayed without the code that built it.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    /// Elementwise add; the right operand may be `r × 1` or `1 × c` and is
    /// broadcast across the left operand.
    Add,
    Mul,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    Tanh,
    Sigmoid,
    SoftmaxRows,
    /// Non-overlapping sum over windows of `k` rows, per column.
    SumPool { k: usize },
    SignedSqrt,
    /// Per-column l2 normalization.
    L2Normalize,
    Concat { axis: Axis },
    Slice { axis: Axis, start: usize, end: usize },
    Transpose,
    Dropout { mask: Tensor },
    /// Gathers rows of a `V × d` table into the columns of a `d × L` matrix.
    Embedding { ids: Vec<usize>, pad: Option<usize> },
    /// Per-row `-log softmax(logits)[target]`, output `R × 1`.
    CrossEntropy { targets: Vec<usize> },
    Sum,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxRows => "softmax_rows",
            Op::SumPool { .. } => "sum_pool",
            Op::SignedSqrt => "signed_sqrt",
            Op::L2Normalize => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Dropout { .. } => "dropout",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::Add | Op::Mul => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

fn attr_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Attr { op, detail: detail.into() }
}

/// Forward value of a primitive.
fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(attr_err(name, format!("expects {n} inputs, got {}", inputs.len())));
        }
    }
    let out = match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::MatMul => inputs[0].matmul(inputs[1])?,
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                a.zip_map(b, |x, y| x + y)
            } else if b.cols == 1 && b.rows == a.rows {
                let mut out = a.clone();
                for r in 0..a.rows {
                    let v = b.data[r];
                    out.data[r * a.cols..(r + 1) * a.cols].iter_mut().for_each(|x| *x += v);
                }
                out
            } else if b.rows == 1 && b.cols == a.cols {
                let mut out = a.clone();
                for r in 0..a.rows {
                    for (x, v) in out.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(&b.data) {
                        *x += v;
                    }
                }
                out
            } else {
                return Err(TensorError::Shape { op: name, left: a.shape(), right: b.shape() });
            }
        }
        Op::Mul => {
            expect_same(name, inputs[0], inputs[1])?;
            inputs[0].zip_map(inputs[1], |x, y| x * y)
        }
        Op::Affine { scale, shift } => inputs[0].map(|x| scale * x + shift),
        Op::Tanh => inputs[0].map(f64::tanh),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::SoftmaxRows => {
            let x = inputs[0];
            let mut out = x.clone();
            for r in 0..x.rows {
                softmax_in_place(&mut out.data[r * x.cols..(r + 1) * x.cols]);
            }
            out
        }
        Op::SumPool { k } => {
            let x = inputs[0];
            if *k == 0 || x.rows % k != 0 {
                return Err(attr_err(name, format!("window {k} does not divide {} rows", x.rows)));
            }
            let mut out = Tensor::zeros(x.rows / k, x.cols);
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out.data[(r / k) * x.cols + c] += x.data[r * x.cols + c];
                }
            }
            out
        }
        Op::SignedSqrt => inputs[0].map(|x| x.signum() * x.abs().sqrt()),
        Op::L2Normalize => {
            let x = inputs[0];
            let mut out = x.clone();
            for c in 0..x.cols {
                let norm = column_norm(x, c);
                for r in 0..x.rows {
                    out.data[r * x.cols + c] = if norm < NORM_EPS { 0.0 } else { x.data[r * x.cols + c] / norm };
                }
            }
            out
        }
        Op::Concat { axis } => concat(inputs, *axis)?,
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let extent = match axis {
                Axis::Rows => x.rows,
                Axis::Cols => x.cols,
            };
            if start >= end || *end > extent {
                return Err(attr_err(name, format!("range {start}..{end} outside extent {extent}")));
            }
            match axis {
                Axis::Rows => Tensor {
                    rows: end - start,
                    cols: x.cols,
                    data: x.data[start * x.cols..end * x.cols].to_vec(),
                },
                Axis::Cols => {
                    let w = end - start;
                    let mut data = Vec::with_capacity(x.rows * w);
                    for r in 0..x.rows {
                        data.extend_from_slice(&x.data[r * x.cols + start..r * x.cols + end]);
                    }
                    Tensor { rows: x.rows, cols: w, data }
                }
            }
        }
        Op::Transpose => inputs[0].transpose(),
        Op::Dropout { mask } => {
            expect_same(name, inputs[0], mask)?;
            inputs[0].zip_map(mask, |x, m| x * m)
        }
        Op::Embedding { ids, pad } => {
            let table = inputs[0];
            if ids.is_empty() {
                return Err(attr_err(name, "empty id sequence"));
            }
            let d = table.cols;
            let mut out = Tensor::zeros(d, ids.len());
            for (i, &id) in ids.iter().enumerate() {
                if id >= table.rows {
                    return Err(attr_err(name, format!("id {id} out of range for {} rows", table.rows)));
                }
                if Some(id) == *pad {
                    continue;
                }
                for j in 0..d {
                    out.data[j * ids.len() + i] = table.data[id * d + j];
                }
            }
            out
        }
        Op::CrossEntropy { targets } => {
            let x = inputs[0];
            if targets.len() != x.rows {
                return Err(attr_err(name, format!("{} targets for {} rows", targets.len(), x.rows)));
            }
            let mut out = Tensor::zeros(x.rows, 1);
            for (r, &t) in targets.iter().enumerate() {
                if t >= x.cols {
                    return Err(attr_err(name, format!("target {t} out of range for {} classes", x.cols)));
                }
                let row = &x.data[r * x.cols..(r + 1) * x.cols];
                out.data[r] = log_sum_exp(row) - row[t];
            }
            out
        }
        Op::Sum => Tensor::scalar(inputs[0].sum()),
    };
    if !out.is_finite() {
        return Err(TensorError::NonFinite { op: name });
    }
    Ok(out)
}

/// Vector-Jacobian products for every input flagged in `needs`.
fn backward_op(op: &Op, inputs: &[&Tensor], out: &Tensor, dout: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                grads[0] = Some(dout.matmul(&b.transpose()).expect("matmul grad shape"));
            }
            if needs[1] {
                grads[1] = Some(a.transpose().matmul(dout).expect("matmul grad shape"));
            }
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                grads[0] = Some(dout.clone());
            }
            if needs[1] {
                grads[1] = Some(if a.shape() == b.shape() {
                    dout.clone()
                } else if b.cols == 1 && b.rows == a.rows {
                    let mut g = Tensor::zeros(b.rows, 1);
                    for r in 0..a.rows {
                        g.data[r] = dout.data[r * a.cols..(r + 1) * a.cols].iter().sum();
                    }
                    g
                } else {
                    let mut g = Tensor::zeros(1, b.cols);
                    for r in 0..a.rows {
                        for (gv, d) in g.data.iter_mut().zip(&dout.data[r * a.cols..(r + 1) * a.cols]) {
                            *gv += d;
                        }
                    }
                    g
                });
            }
        }
        Op::Mul => {
            if needs[0] {
                grads[0] = Some(dout.zip_map(inputs[1], |d, y| d * y));
            }
            if needs[1] {
                grads[1] = Some(dout.zip_map(inputs[0], |d, x| d * x));
            }
        }
        Op::Affine { scale, .. } => grads[0] = Some(dout.map(|d| d * scale)),
        Op::Tanh => grads[0] = Some(dout.zip_map(out, |d, y| d * (1.0 - y * y))),
        Op::Sigmoid => grads[0] = Some(dout.zip_map(out, |d, y| d * y * (1.0 - y))),
        Op::SoftmaxRows => {
            let mut g = Tensor::zeros(out.rows, out.cols);
            for r in 0..out.rows {
                let span = r * out.cols..(r + 1) * out.cols;
                let y = &out.data[span.clone()];
                let d = &dout.data[span.clone()];
                let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                for (gv, (yv, dv)) in g.data[span].iter_mut().zip(y.iter().zip(d)) {
                    *gv = yv * (dv - dot);
                }
            }
            grads[0] = Some(g);
        }
        Op::SumPool { k } => {
            let x = inputs[0];
            let mut g = Tensor::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                for c in 0..x.cols {
                    g.data[r * x.cols + c] = dout.data[(r / k) * x.cols + c];
                }
            }
            grads[0] = Some(g);
        }
        Op::SignedSqrt => {
            grads[0] = Some(dout.zip_map(inputs[0], |d, x| d * 0.5 / (x.abs() + SQRT_GRAD_EPS).sqrt()));
        }
        Op::L2Normalize => {
            let x = inputs[0];
            let mut g = Tensor::zeros(x.rows, x.cols);
            for c in 0..x.cols {
                let norm = column_norm(x, c);
                if norm < NORM_EPS {
                    continue;
                }
                let dot: f64 = (0..x.rows).map(|r| out.get(r, c) * dout.get(r, c)).sum();
                for r in 0..x.rows {
                    g.set(r, c, (dout.get(r, c) - out.get(r, c) * dot) / norm);
                }
            }
            grads[0] = Some(g);
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            for (i, x) in inputs.iter().enumerate() {
                let (start, end) = match axis {
                    Axis::Rows => (offset, offset + x.rows),
                    Axis::Cols => (offset, offset + x.cols),
                };
                offset = end;
                if needs[i] {
                    let slice = Op::Slice { axis: *axis, start, end };
                    grads[i] = Some(forward(&slice, &[dout]).expect("concat grad slice"));
                }
            }
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let mut g = Tensor::zeros(x.rows, x.cols);
            match axis {
                Axis::Rows => g.data[start * x.cols..end * x.cols].copy_from_slice(&dout.data),
                Axis::Cols => {
                    let w = end - start;
                    for r in 0..x.rows {
                        g.data[r * x.cols + start..r * x.cols + end].copy_from_slice(&dout.data[r * w..(r + 1) * w]);
                    }
                }
            }
            grads[0] = Some(g);
        }
        Op::Transpose => grads[0] = Some(dout.transpose()),
        Op::Dropout { mask } => grads[0] = Some(dout.zip_map(mask, |d, m| d * m)),
        Op::Embedding { ids, pad } => {
            let table = inputs[0];
            let d = table.cols;
            let mut g = Tensor::zeros(table.rows, d);
            for (i, &id) in ids.iter().enumerate() {
                if Some(id) == *pad {
                    continue;
                }
                for j in 0..d {
                    g.data[id * d + j] += dout.data[j * ids.len() + i];
                }
            }
            grads[0] = Some(g);
        }
        Op::CrossEntropy { targets } => {
            let x = inputs[0];
            let mut g = Tensor::zeros(x.rows, x.cols);
            for (r, &t) in targets.iter().enumerate() {
                let span = r * x.cols..(r + 1) * x.cols;
                let mut p = x.data[span.clone()].to_vec();
                softmax_in_place(&mut p);
                p[t] -= 1.0;
                for (gv, pv) in g.data[span].iter_mut().zip(p) {
                    *gv = dout.data[r] * pv;
                }
            }
            grads[0] = Some(g);
        }
        Op::Sum => grads[0] = Some(Tensor::filled(inputs[0].rows, inputs[0].cols, dout.data[0])),
    }
    grads
}

fn concat(inputs: &[&Tensor], axis: Axis) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| attr_err("concat", "no inputs"))?;
    match axis {
        Axis::Rows => {
            let mut data = Vec::new();
            let mut rows = 0;
            for t in inputs {
                if t.cols != first.cols {
                    return Err(TensorError::Shape { op: "concat", left: first.shape(), right: t.shape() });
                }
                data.extend_from_slice(&t.data);
                rows += t.rows;
            }
            Ok(Tensor { rows, cols: first.cols, data })
        }
        Axis::Cols => {
            for t in inputs {
                if t.rows != first.rows {
                    return Err(TensorError::Shape { op: "concat", left: first.shape(), right: t.shape() });
                }
            }
            let cols: usize = inputs.iter().map(|t| t.cols).sum();
            let mut data = Vec::with_capacity(first.rows * cols);
            for r in 0..first.rows {
                for t in inputs {
                    data.extend_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
                }
            }
            Ok(Tensor { rows: first.rows, cols, data })
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

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn column_norm(x: &Tensor, c: usize) -> f64 {
    (0..x.rows).map(|r| x.get(r, c).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor>,
    param: Option<ParamId>,
}

/// Tape of primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    has_dropout: bool,
    masks_frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, inputs, requires_grad, grad: None, param });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false, None)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad, None)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same variable so fan-out gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Leaf, Vec::new(), p.trainable, Some(id));
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(var);
        var
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records one primitive application.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut values = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        for &v in inputs {
            let n = self.node(v)?;
            requires_grad |= n.requires_grad;
            values.push(&n.value);
        }
        let value = forward(&op, &values)?;
        if matches!(op, Op::Dropout { .. }) {
            self.has_dropout = true;
        }
        Ok(self.push(value, op, inputs.to_vec(), requires_grad, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    pub fn sum_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(Op::SumPool { k }, &[x])
    }

    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SignedSqrt, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2Normalize, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn dropout(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        self.apply(Op::Dropout { mask }, &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        self.apply(Op::Embedding { ids: ids.to_vec(), pad }, &[table])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(Op::CrossEntropy { targets: targets.to_vec() }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    /// `w · x + b` with `b` broadcast across columns of `x`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Declares that every dropout mask in the tape is fixed, which makes
    /// [`Graph::replay`] reproduce the recorded forward pass.
    pub fn freeze_masks(&mut self) {
        self.masks_frozen = true;
    }

    pub fn is_deterministic(&self) -> bool {
        !self.has_dropout || self.masks_frozen
    }

    /// Populates `grad` on every node that requires it, with `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.node(loss)?.value.shape();
        if shape != [1, 1] {
            return Err(TensorError::NotScalar(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(dout) = node.grad.as_ref() else { continue };
            if node.inputs.is_empty() {
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = backward_op(&node.op, &values, &node.value, dout, &needs);
            let inputs = node.inputs.clone();
            for (v, g) in inputs.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf value from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].inputs.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let value = forward(&node.op, &values)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Parameter gradients after [`Graph::backward`]; parameters that did not
    /// influence the loss are skipped.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
            .collect()
    }

    fn trainable_leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].inputs.is_empty() && self.nodes[i].requires_grad)
            .collect()
    }
}

/// One scalar compared by [`finite_difference_entries`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientEntry {
    pub leaf: Var,
    pub param: Option<ParamId>,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientEntry {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub fn relative_error(&self) -> f64 {
        let (a, n) = (self.analytic, self.numeric);
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }
}

/// Reverse-mode gradient and central difference `(f(x+eps) - f(x-eps)) / 2eps`
/// for every scalar of every trainable leaf.
pub fn finite_difference_entries(graph: &mut Graph, loss: Var, eps: f64) -> Result<Vec<GradientEntry>> {
    if !(eps > 0.0) {
        return Err(TensorError::BadStep(eps));
    }
    if !graph.is_deterministic() {
        return Err(TensorError::Nondeterministic);
    }
    graph.backward(loss)?;
    let leaves = graph.trainable_leaves();
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&i| {
            let n = &graph.nodes[i];
            n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.rows, n.value.cols))
        })
        .collect();
    let mut out = Vec::new();
    for (&leaf, grad) in leaves.iter().zip(&analytic) {
        for k in 0..grad.len() {
            let original = graph.nodes[leaf].value.data[k];
            graph.nodes[leaf].value.data[k] = original + eps;
            graph.replay()?;
            let plus = graph.nodes[loss.0].value.data[0];
            graph.nodes[leaf].value.data[k] = original - eps;
            graph.replay()?;
            let minus = graph.nodes[loss.0].value.data[0];
            graph.nodes[leaf].value.data[k] = original;
            out.push(GradientEntry {
                leaf: Var(leaf),
                param: graph.nodes[leaf].param,
                index: k,
                analytic: grad.data[k],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    graph.replay()?;
    graph.backward(loss)?;
    Ok(out)
}

/// Largest [`GradientEntry::relative_error`] over every trainable scalar.
pub fn finite_difference_check(graph: &mut Graph, loss: Var, eps: f64) -> Result<f64> {
    let entries = finite_difference_entries(graph, loss, eps)?;
    Ok(entries.iter().map(GradientEntry::relative_error).fold(0.0, f64::max))
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)` at train time,
/// and evaluation uses no mask at all.
#[derive(Debug)]
pub enum Dropout {
    Off,
    On { p: f64, rng: rand_chacha::ChaCha8Rng },
}

impl Dropout {
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { p, .. } if *p <= 0.0 => Ok(x),
            Dropout::On { p, rng } => {
                let shape = g.value(x).shape();
                let keep = 1.0 - *p;
                let data = (0..shape[0] * shape[1])
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, Tensor::new(shape[0], shape[1], data)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![0.0]), true);
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_pool_windows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::column(vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.sum_pool(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
        assert!(matches!(g.sum_pool(x, 3), Err(TensorError::Attr { op: "sum_pool", .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![0.3, -1.0, 2.0]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::Shape { op: "matmul", left: [2, 3], right: [2, 3] });
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::column(vec![1e308]));
        assert_eq!(g.affine(x, 10.0, 0.0).unwrap_err(), TensorError::NonFinite { op: "affine" });
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![1.0, 2.0]), true);
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NotScalar([2, 1]));
        assert_eq!(g.backward(Var(99)).unwrap_err(), TensorError::UnknownVar(99));
    }

    #[test]
    fn l2_normalize_of_zero_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![0.0; 3]), true);
        let y = g.l2_normalize(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn l2_normalize_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(5, 1, 1.0, &mut rng), true);
        let u = g.constant(Tensor::uniform(1, 5, 1.0, &mut rng));
        let y = g.l2_normalize(x).unwrap();
        let loss = g.matmul(u, y).unwrap();
        let err = finite_difference_check(&mut g, loss, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_model_is_exact() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::row(vec![0.5, -1.5, 2.0]), true);
        let x = g.constant(Tensor::column(vec![1.0, 2.0, -3.0]));
        let y = g.matmul(w, x).unwrap();
        let err = finite_difference_check(&mut g, y, 1e-3).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_unfrozen_masks() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![1.0]), true);
        let s = g.sum(x).unwrap();
        assert_eq!(finite_difference_check(&mut g, s, 0.0).unwrap_err(), TensorError::BadStep(0.0));

        let d = g.dropout(x, Tensor::column(vec![1.25])).unwrap();
        let s = g.sum(d).unwrap();
        assert_eq!(finite_difference_check(&mut g, s, 1e-5).unwrap_err(), TensorError::Nondeterministic);
        g.freeze_masks();
        assert!(finite_difference_check(&mut g, s, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![3.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.add(y, x).unwrap();
        g.backward(s).unwrap();
        assert!(close(g.grad(x).unwrap().data()[0], 7.0, 1e-12));
    }

    #[test]
    fn embedding_pad_column_is_zero_and_gets_no_grad() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::new(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let e = g.embedding(table, &[1, 0, 2, 1], Some(0)).unwrap();
        assert_eq!(g.value(e).shape(), [2, 4]);
        assert_eq!(g.value(e).column_values(1), vec![0.0, 0.0]);
        assert_eq!(g.value(e).column_values(2), vec![3.0, 4.0]);
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
        assert!(g.embedding(table, &[3], None).is_err());
        assert!(g.embedding(table, &[], None).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!(close(g.value(l).data()[0], expected, 1e-15));
    }
}
