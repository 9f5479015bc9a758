//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Record`] is built define-by-run: every builder call evaluates its
//! primitive immediately and appends a node, so the node list is already in
//! topological order. The same record can be re-evaluated at new input
//! values with [`Record::forward`], which is how the finite-difference
//! checker and the gradient gate reuse one graph.
//!
//! Binary elementwise primitives broadcast rows (`1×c`), columns (`r×1`)
//! and scalars (`1×1`) on either side.

mod check;

pub use check::{finite_diff_check, finite_diff_check_piecewise, FdOptions, GradientEntry, GradientReport};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::{lowrank, special};

/// Handle to a node of a [`Record`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum BatchNormMode {
    /// Normalise by batch statistics.
    Train { eps: f64 },
    /// Normalise by frozen running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    ReluFloor(Var, f64),
    NormalCdf(Var),
    NormalQuantile(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mode: BatchNormMode },
    CholRank1(Var, Var),
    LowerMatVec(Var, Var),
    LogDet(Var, Var),
    InvQuad(Var, Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::ReluFloor(..) => "relu_floor",
            Op::NormalCdf(..) => "normal_cdf",
            Op::NormalQuantile(..) => "normal_quantile",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "gather",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CholRank1(..) => "chol_rank1",
            Op::LowerMatVec(..) => "lower_matvec",
            Op::LogDet(..) => "log_det",
            Op::InvQuad(..) => "inv_quad",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
    // softmax probabilities, or [x̂ | batch mean | batch inv-std] for batch norm
    aux: Option<Array2<f64>>,
}

/// Recorded computation: nodes in evaluation order with cached values.
#[derive(Debug, Clone, Default)]
pub struct Record {
    nodes: Vec<Node>,
    stale: bool,
    fault: Option<Fault>,
}

#[derive(Debug, Clone)]
enum Fault {
    NonFinite(String),
    Invalid(String),
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn dims(a: &Array2<f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let axis = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((axis(a.0, b.0)?, axis(a.1, b.1)?))
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn binary(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim()).expect("shapes checked at record time");
    let av = a.broadcast(shape).expect("broadcastable");
    let bv = b.broadcast(shape).expect("broadcastable");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_slices<'a>(a: &'a Array2<f64>) -> impl Iterator<Item = &'a [f64]> {
    a.rows().into_iter().map(|r| r.to_slice().expect("standard layout"))
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// First non-finite or shape diagnostic raised while recording, if any.
    pub fn status(&self) -> Result<()> {
        match &self.fault {
            Some(Fault::NonFinite(msg)) => Err(Error::NonFinite(msg.clone())),
            Some(Fault::Invalid(msg)) => Err(Error::Input(msg.clone())),
            None => Ok(()),
        }
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(Op::Input, value, None)
    }

    /// Non-differentiable leaf (data, noise, masks).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(Op::Constant, value, None)
    }

    /// Replaces the value of a leaf; the record must be re-run with
    /// [`Record::forward`] before values or gradients are read again.
    pub fn set_input(&mut self, v: Var, value: Array2<f64>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Input | Op::Constant) {
            return Err(Error::State(format!("node {} is not a leaf", v.0)));
        }
        if node.value.dim() != value.dim() {
            return Err(Error::shape("set_input", dims(&node.value), dims(&value)));
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn forward(&mut self, inputs: Vec<(Var, Array2<f64>)>) -> Result<()> {
        for (v, value) in inputs {
            self.set_input(v, value)?;
        }
        self.fault = None;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.eval(&op).map_err(|e| Error::Input(format!("node {i} ({}): {e}", op.name())))?;
            self.check_finite(i, &op, &value);
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        self.stale = false;
        self.status()
    }

    fn check_finite(&mut self, idx: usize, op: &Op, value: &Array2<f64>) {
        if self.fault.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.fault = Some(Fault::NonFinite(format!("node {idx} ({})", op.name())));
        }
    }

    fn push_raw(&mut self, op: Op, value: Array2<f64>, aux: Option<Array2<f64>>) -> Var {
        let idx = self.nodes.len();
        self.check_finite(idx, &op, &value);
        self.nodes.push(Node { op, value, aux });
        Var(idx)
    }

    fn push(&mut self, op: Op) -> Var {
        match self.eval(&op) {
            Ok((value, aux)) => self.push_raw(op, value, aux),
            Err(e) => {
                // keep recording; the first failure is reported by `status`
                if self.fault.is_none() {
                    self.fault = Some(Fault::Invalid(format!("node {} ({}): {e}", self.nodes.len(), op.name())));
                }
                self.nodes.push(Node { op, value: Array2::zeros((0, 0)), aux: None });
                Var(self.nodes.len() - 1)
            }
        }
    }

    fn v(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn eval(&self, op: &Op) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let plain = |a: Array2<f64>| Ok((a, None));
        match op {
            Op::Input | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                if x.ncols() != y.nrows() {
                    return Err(Error::shape("matmul", x.ncols(), y.nrows()));
                }
                plain(x.dot(y))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                if broadcast_shape(x.dim(), y.dim()).is_none() {
                    return Err(Error::shape(op.name(), dims(x), dims(y)));
                }
                plain(match op {
                    Op::Add(..) => binary(x, y, |p, q| p + q),
                    Op::Sub(..) => binary(x, y, |p, q| p - q),
                    Op::Mul(..) => binary(x, y, |p, q| p * q),
                    _ => binary(x, y, |p, q| p / q),
                })
            }
            Op::Scale(a, c) => plain(self.v(*a) * *c),
            Op::Offset(a, c) => plain(self.v(*a) + *c),
            Op::Exp(a) => plain(self.v(*a).mapv(f64::exp)),
            Op::Log(a) => plain(self.v(*a).mapv(f64::ln)),
            Op::Tanh(a) => plain(self.v(*a).mapv(f64::tanh)),
            Op::Sigmoid(a) => plain(self.v(*a).mapv(sigmoid)),
            Op::ReluFloor(a, floor) => plain(self.v(*a).mapv(|x| x.max(0.0).max(*floor))),
            Op::NormalCdf(a) => plain(self.v(*a).mapv(special::cdf)),
            Op::NormalQuantile(a) => {
                let x = self.v(*a);
                if x.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(Error::Domain("normal_quantile argument outside (0, 1)".into()));
                }
                plain(x.mapv(special::quantile))
            }
            Op::Sum(a) => plain(Array2::from_elem((1, 1), self.v(*a).sum())),
            Op::SumCols(a) => plain(self.v(*a).sum_axis(Axis(1)).insert_axis(Axis(1))),
            Op::ConcatCols(parts) => {
                let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.v(*p).view()).collect();
                let out = ndarray::concatenate(Axis(1), &views)
                    .map_err(|e| Error::shape("concat_cols", "equal row counts", e))?;
                plain(out)
            }
            Op::ConcatRows(parts) => {
                let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.v(*p).view()).collect();
                let out = ndarray::concatenate(Axis(0), &views)
                    .map_err(|e| Error::shape("concat_rows", "equal column counts", e))?;
                plain(out)
            }
            Op::SliceCols(a, lo, hi) => {
                let x = self.v(*a);
                if *hi > x.ncols() || lo > hi {
                    return Err(Error::shape("slice_cols", format!("{lo}..{hi}"), dims(x)));
                }
                plain(x.slice(s![.., *lo..*hi]).to_owned())
            }
            Op::SliceRows(a, lo, hi) => {
                let x = self.v(*a);
                if *hi > x.nrows() || lo > hi {
                    return Err(Error::shape("slice_rows", format!("{lo}..{hi}"), dims(x)));
                }
                plain(x.slice(s![*lo..*hi, ..]).to_owned())
            }
            Op::Gather(table, ids) => {
                let t = self.v(*table);
                if let Some(&bad) = ids.iter().find(|&&i| i >= t.nrows()) {
                    return Err(Error::Input(format!("gather index {bad} out of range {}", t.nrows())));
                }
                plain(t.select(Axis(0), ids))
            }
            Op::SoftmaxXent { logits, targets, weights } => {
                let z = self.v(*logits);
                if targets.len() != z.nrows() || weights.len() != z.nrows() {
                    return Err(Error::shape("softmax_xent", z.nrows(), targets.len()));
                }
                if let Some(&bad) = targets.iter().find(|&&t| t >= z.ncols()) {
                    return Err(Error::Input(format!("target id {bad} out of range {}", z.ncols())));
                }
                let mut probs = z.clone();
                let mut loss = Array2::zeros((z.nrows(), 1));
                for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let total: f64 = row.sum();
                    row.mapv_inplace(|x| x / total);
                    if weights[r] != 0.0 {
                        let lse = m + total.ln();
                        loss[[r, 0]] = weights[r] * (lse - z[[r, targets[r]]]);
                    }
                }
                Ok((loss, Some(probs)))
            }
            Op::BatchNorm { x, gamma, beta, mode } => {
                let (x, g, b) = (self.v(*x), self.v(*gamma), self.v(*beta));
                let c = x.ncols();
                if g.dim() != (1, c) || b.dim() != (1, c) {
                    return Err(Error::shape("batch_norm", format!("1x{c}"), dims(g)));
                }
                let (mean, inv_std) = match mode {
                    BatchNormMode::Train { eps } => {
                        if x.nrows() < 2 {
                            return Err(Error::Config("batch norm in train mode needs batch size >= 2".into()));
                        }
                        let mean = x.mean_axis(Axis(0)).expect("non-empty");
                        let var = x.var_axis(Axis(0), 0.0);
                        (mean, var.mapv(|v| 1.0 / (v + eps).sqrt()))
                    }
                    BatchNormMode::Eval { mean, var, eps } => {
                        if mean.len() != c || var.len() != c {
                            return Err(Error::shape("batch_norm running stats", c, mean.len()));
                        }
                        let mean = ndarray::Array1::from(mean.clone());
                        let inv = ndarray::Array1::from(var.clone()).mapv(|v| 1.0 / (v + eps).sqrt());
                        (mean, inv)
                    }
                };
                let xhat = (x - &mean) * &inv_std;
                let out = &xhat * g + b;
                let mut aux = Array2::zeros((x.nrows() + 2, c));
                aux.slice_mut(s![..x.nrows(), ..]).assign(&xhat);
                aux.row_mut(x.nrows()).assign(&mean);
                aux.row_mut(x.nrows() + 1).assign(&inv_std);
                Ok((out, Some(aux)))
            }
            Op::CholRank1(w, a) => {
                let (w, a) = (self.v(*w), self.v(*a));
                if w.dim() != a.dim() {
                    return Err(Error::shape("chol_rank1", dims(w), dims(a)));
                }
                let d = w.ncols();
                let mut out = Array2::zeros((w.nrows(), d * d));
                for ((wr, ar), mut or) in row_slices(w).zip(row_slices(a)).zip(out.rows_mut()) {
                    lowrank::chol_rank1_kernel(wr, ar, or.as_slice_mut().expect("standard layout"))?;
                }
                plain(out)
            }
            Op::LowerMatVec(l, e) => {
                let (l, e) = (self.v(*l), self.v(*e));
                let d = e.ncols();
                if l.dim() != (e.nrows(), d * d) {
                    return Err(Error::shape("lower_matvec", format!("{}x{}", e.nrows(), d * d), dims(l)));
                }
                let mut out = Array2::zeros(e.dim());
                for ((lr, er), mut or) in row_slices(l).zip(row_slices(e)).zip(out.rows_mut()) {
                    for i in 0..d {
                        or[i] = (0..=i).map(|j| lr[i * d + j] * er[j]).sum();
                    }
                }
                plain(out)
            }
            Op::LogDet(w, a) => {
                let (w, a) = (self.v(*w), self.v(*a));
                if w.dim() != a.dim() {
                    return Err(Error::shape("log_det", dims(w), dims(a)));
                }
                let vals: Vec<f64> = row_slices(w)
                    .zip(row_slices(a))
                    .map(|(wr, ar)| lowrank::log_det_kernel(wr, ar))
                    .collect();
                plain(Array2::from_shape_vec((w.nrows(), 1), vals).expect("column"))
            }
            Op::InvQuad(w, a, q) => {
                let (w, a, q) = (self.v(*w), self.v(*a), self.v(*q));
                if w.dim() != a.dim() || w.dim() != q.dim() {
                    return Err(Error::shape("inv_quad", dims(w), dims(q)));
                }
                let vals: Vec<f64> = row_slices(w)
                    .zip(row_slices(a))
                    .zip(row_slices(q))
                    .map(|((wr, ar), qr)| lowrank::inv_quad_kernel(wr, ar, qr))
                    .collect();
                plain(Array2::from_shape_vec((w.nrows(), 1), vals).expect("column"))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }
    /// max(ReLU(x), floor); the subgradient is 0 wherever the floor is active.
    pub fn relu_floor(&mut self, a: Var, floor: f64) -> Var {
        self.push(Op::ReluFloor(a, floor))
    }
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.push(Op::NormalCdf(a))
    }
    pub fn normal_quantile(&mut self, a: Var) -> Var {
        self.push(Op::NormalQuantile(a))
    }
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }
    /// Row sums as an r×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.push(Op::SumCols(a))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        self.push(Op::SliceCols(a, lo, hi))
    }
    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        self.push(Op::SliceRows(a, lo, hi))
    }
    /// Rows of `table` at `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        self.push(Op::Gather(table, ids))
    }
    /// Per-row weighted cross-entropy `weight_r · (logsumexp(z_r) − z_r[target_r])`, as an n×1 column.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        self.push(Op::SoftmaxXent { logits, targets, weights })
    }
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode) -> Var {
        self.push(Op::BatchNorm { x, gamma, beta, mode })
    }
    /// Row-wise Cholesky factor of diag(w) + aaᵀ, each row a flattened d×d matrix.
    pub fn chol_rank1(&mut self, w: Var, a: Var) -> Var {
        self.push(Op::CholRank1(w, a))
    }
    /// Row-wise L·ε for flattened lower-triangular L.
    pub fn lower_matvec(&mut self, l: Var, eps: Var) -> Var {
        self.push(Op::LowerMatVec(l, eps))
    }
    pub fn log_det(&mut self, w: Var, a: Var) -> Var {
        self.push(Op::LogDet(w, a))
    }
    pub fn inv_quad(&mut self, w: Var, a: Var, q: Var) -> Var {
        self.push(Op::InvQuad(w, a, q))
    }

    /// Batch mean and variance seen by a train-mode batch-norm node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::BatchNorm { x, mode: BatchNormMode::Train { .. }, .. } => {
                let n = self.v(*x).nrows();
                let aux = node.aux.as_ref()?;
                let mean = aux.row(n).to_vec();
                let var = self.v(*x).var_axis(Axis(0), 0.0).to_vec();
                Some((mean, var))
            }
            _ => None,
        }
    }

    /// Reverse sweep from the scalar node `output`, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients> {
        if self.stale {
            return Err(Error::State("backward called before forward on updated inputs".into()));
        }
        self.status()?;
        if self.v(output).dim() != (1, 1) {
            return Err(Error::shape("backward", "1x1", dims(self.v(output))));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::from_elem((1, 1), seed));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn backprop(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        }
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.v(*b).t()));
                acc(grads, *b, self.v(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, reduce_to(g.clone(), self.v(*a).dim()));
                acc(grads, *b, reduce_to(g.clone(), self.v(*b).dim()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, reduce_to(g.clone(), self.v(*a).dim()));
                acc(grads, *b, reduce_to(-g, self.v(*b).dim()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                acc(grads, *a, reduce_to(binary(g, y, |p, q| p * q), x.dim()));
                acc(grads, *b, reduce_to(binary(g, x, |p, q| p * q), y.dim()));
            }
            Op::Div(a, b) => {
                let (x, y) = (self.v(*a), self.v(*b));
                acc(grads, *a, reduce_to(binary(g, y, |p, q| p / q), x.dim()));
                let gy = binary(&binary(g, out, |p, q| p * q), y, |p, q| -p / q);
                acc(grads, *b, reduce_to(gy, y.dim()));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::Offset(a, _) => acc(grads, *a, g.clone()),
            Op::Exp(a) => acc(grads, *a, g * out),
            Op::Log(a) => acc(grads, *a, g / self.v(*a)),
            Op::Tanh(a) => acc(grads, *a, Zip::from(g).and(out).map_collect(|&g, &y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(grads, *a, Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y))),
            Op::ReluFloor(a, floor) => {
                let x = self.v(*a);
                let floor = floor.max(0.0);
                acc(grads, *a, Zip::from(g).and(x).map_collect(|&g, &x| if x > floor { g } else { 0.0 }));
            }
            Op::NormalCdf(a) => {
                acc(grads, *a, Zip::from(g).and(self.v(*a)).map_collect(|&g, &x| g * special::pdf(x)));
            }
            Op::NormalQuantile(a) => {
                acc(grads, *a, Zip::from(g).and(out).map_collect(|&g, &x| g / special::pdf(x)));
            }
            Op::Sum(a) => acc(grads, *a, Array2::from_elem(self.v(*a).dim(), g[[0, 0]])),
            Op::SumCols(a) => {
                let dim = self.v(*a).dim();
                acc(grads, *a, g.broadcast(dim).expect("column broadcast").to_owned());
            }
            Op::ConcatCols(parts) => {
                let mut lo = 0;
                for p in parts {
                    let w = self.v(*p).ncols();
                    acc(grads, *p, g.slice(s![.., lo..lo + w]).to_owned());
                    lo += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for p in parts {
                    let h = self.v(*p).nrows();
                    acc(grads, *p, g.slice(s![lo..lo + h, ..]).to_owned());
                    lo += h;
                }
            }
            Op::SliceCols(a, lo, hi) => {
                let mut full = Array2::zeros(self.v(*a).dim());
                full.slice_mut(s![.., *lo..*hi]).assign(g);
                acc(grads, *a, full);
            }
            Op::SliceRows(a, lo, hi) => {
                let mut full = Array2::zeros(self.v(*a).dim());
                full.slice_mut(s![*lo..*hi, ..]).assign(g);
                acc(grads, *a, full);
            }
            Op::Gather(table, ids) => {
                let mut full = Array2::zeros(self.v(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = full.row_mut(id);
                    dst += &g.row(r);
                }
                acc(grads, *table, full);
            }
            Op::SoftmaxXent { logits, targets, weights } => {
                let mut gz = node.aux.clone().expect("softmax cache");
                for (r, mut row) in gz.rows_mut().into_iter().enumerate() {
                    let scale = g[[r, 0]] * weights[r];
                    if scale == 0.0 {
                        row.fill(0.0);
                    } else {
                        row[targets[r]] -= 1.0;
                        row *= scale;
                    }
                }
                acc(grads, *logits, gz);
            }
            Op::BatchNorm { x, gamma, beta, mode } => {
                let xv = self.v(*x);
                let n = xv.nrows();
                let aux = node.aux.as_ref().expect("batch norm cache");
                let xhat = aux.slice(s![..n, ..]);
                let inv_std = aux.row(n + 1);
                let gam = self.v(*gamma).row(0).to_owned();
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *gamma, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gxhat = g * &gam;
                let gx = match mode {
                    BatchNormMode::Eval { .. } => gxhat * &inv_std,
                    BatchNormMode::Train { .. } => {
                        let nf = n as f64;
                        let mean_g = gxhat.sum_axis(Axis(0)) / nf;
                        let mean_gx = (&gxhat * &xhat).sum_axis(Axis(0)) / nf;
                        (&gxhat - &mean_g - &(&xhat * &mean_gx)) * &inv_std
                    }
                };
                acc(grads, *x, gx);
            }
            Op::CholRank1(w, a) => {
                let (wv, av) = (self.v(*w), self.v(*a));
                let mut gw = Array2::zeros(wv.dim());
                let mut ga = Array2::zeros(av.dim());
                for r in 0..wv.nrows() {
                    lowrank::chol_rank1_backward(
                        wv.row(r).to_slice().expect("layout"),
                        av.row(r).to_slice().expect("layout"),
                        g.row(r).to_slice().expect("layout"),
                        gw.row_mut(r).into_slice().expect("layout"),
                        ga.row_mut(r).into_slice().expect("layout"),
                    );
                }
                acc(grads, *w, gw);
                acc(grads, *a, ga);
            }
            Op::LowerMatVec(l, e) => {
                let (lv, ev) = (self.v(*l), self.v(*e));
                let d = ev.ncols();
                let mut gl = Array2::zeros(lv.dim());
                let mut ge = Array2::zeros(ev.dim());
                for r in 0..ev.nrows() {
                    for i in 0..d {
                        let gi = g[[r, i]];
                        for j in 0..=i {
                            gl[[r, i * d + j]] = gi * ev[[r, j]];
                            ge[[r, j]] += lv[[r, i * d + j]] * gi;
                        }
                    }
                }
                acc(grads, *l, gl);
                acc(grads, *e, ge);
            }
            Op::LogDet(w, a) => {
                let (wv, av) = (self.v(*w), self.v(*a));
                let mut gw = Array2::zeros(wv.dim());
                let mut ga = Array2::zeros(av.dim());
                for r in 0..wv.nrows() {
                    lowrank::log_det_backward(
                        wv.row(r).to_slice().expect("layout"),
                        av.row(r).to_slice().expect("layout"),
                        g[[r, 0]],
                        gw.row_mut(r).into_slice().expect("layout"),
                        ga.row_mut(r).into_slice().expect("layout"),
                    );
                }
                acc(grads, *w, gw);
                acc(grads, *a, ga);
            }
            Op::InvQuad(w, a, q) => {
                let (wv, av, qv) = (self.v(*w), self.v(*a), self.v(*q));
                let mut gw = Array2::zeros(wv.dim());
                let mut ga = Array2::zeros(av.dim());
                let mut gq = Array2::zeros(qv.dim());
                for r in 0..wv.nrows() {
                    lowrank::inv_quad_backward(
                        wv.row(r).to_slice().expect("layout"),
                        av.row(r).to_slice().expect("layout"),
                        qv.row(r).to_slice().expect("layout"),
                        g[[r, 0]],
                        gw.row_mut(r).into_slice().expect("layout"),
                        ga.row_mut(r).into_slice().expect("layout"),
                        gq.row_mut(r).into_slice().expect("layout"),
                    );
                }
                acc(grads, *w, gw);
                acc(grads, *a, ga);
                acc(grads, *q, gq);
            }
        }
    }
}

#[cfg(test)]
mod tests;
