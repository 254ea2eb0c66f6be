//! Single-use computation tape with reverse-mode differentiation.
//!
//! A forward pass appends nodes; node `k` only ever reads nodes `< k`, so
//! insertion order is a valid topological order and the backward sweep is a
//! plain reverse iteration. All reductions run row-major, left to right, which
//! makes repeated passes bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::params::{ParamStore, Partition};
use super::tensor::Tensor;
use crate::error::{DifdError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    ConcatLastDim,
    ConcatRows,
    SliceLastDim,
    SliceRows,
    RowGather,
    Transpose,
    Tanh,
    Sigmoid,
    Relu,
    MaskedSoftmax,
    LogSoftmax,
    Sum,
    SumLastDim,
    Mean,
    ScalarMul,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ConcatLastDim => "concat_last_dim",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceLastDim => "slice_last_dim",
            OpKind::SliceRows => "slice_rows",
            OpKind::RowGather => "row_gather",
            OpKind::Transpose => "transpose",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::MaskedSoftmax => "masked_softmax_lastdim",
            OpKind::LogSoftmax => "log_softmax_lastdim",
            OpKind::Sum => "sum",
            OpKind::SumLastDim => "sum_lastdim",
            OpKind::Mean => "mean",
            OpKind::ScalarMul => "scalar_mul",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        const KINDS: [OpKind; 21] = [
            OpKind::Constant,
            OpKind::Param,
            OpKind::MatMul,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::ConcatLastDim,
            OpKind::ConcatRows,
            OpKind::SliceLastDim,
            OpKind::SliceRows,
            OpKind::RowGather,
            OpKind::Transpose,
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::Relu,
            OpKind::MaskedSoftmax,
            OpKind::LogSoftmax,
            OpKind::Sum,
            OpKind::SumLastDim,
            OpKind::Mean,
            OpKind::ScalarMul,
        ];
        KINDS.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generic op selector for [`Tape::apply`]; ops with non-tensor arguments
/// carry them inline.
#[derive(Debug, Clone, PartialEq)]
pub enum OpSpec {
    MatMul,
    Add,
    Mul,
    ConcatLastDim,
    RowGather(Vec<usize>),
    Tanh,
    Sigmoid,
    Relu,
    MaskedSoftmax(Vec<f64>),
    Sum,
    Mean,
    ScalarMul(f64),
}

/// How the right operand of an elementwise op maps onto the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `[cols]` or `[1, cols]` repeated over every row.
    Row,
    /// `[rows, 1]` repeated over every column.
    Col,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { index: usize },
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    ConcatLastDim(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLastDim { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    RowGather { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumLastDim(Var),
    Mean(Var),
    ScalarMul(Var, f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param { .. } => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ConcatLastDim(_) => OpKind::ConcatLastDim,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceLastDim { .. } => OpKind::SliceLastDim,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::RowGather { .. } => OpKind::RowGather,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::MaskedSoftmax(_) => OpKind::MaskedSoftmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::SumLastDim(_) => OpKind::SumLastDim,
            Op::Mean(_) => OpKind::Mean,
            Op::ScalarMul(..) => OpKind::ScalarMul,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::ConcatLastDim(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SliceLastDim { x, .. }
            | Op::SliceRows { x, .. }
            | Op::RowGather { x, .. }
            | Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::MaskedSoftmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::SumLastDim(x)
            | Op::Mean(x)
            | Op::ScalarMul(x, _) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    param_reads: usize,
    consumed: bool,
    fault: Option<OpKind>,
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Drops every node; the tape can be reused for a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_reads = 0;
        self.consumed = false;
    }

    /// Negative-control hook: scales the backward rule of `kind` by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Number of `param` lookups issued on this tape, including cache hits.
    pub fn param_reads(&self) -> usize {
        self.param_reads
    }

    /// Store indices of every parameter bound on this tape, ascending.
    pub fn bound_params(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.params.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Store index backing a parameter node, if `v` is one.
    pub fn param_index(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param { index } => Some(index),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a store entry. Repeated lookups of the same name on one
    /// tape return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let index = store.index_of(name).ok_or_else(|| DifdError::UnknownParam(name.to_string()))?;
        self.param_reads += 1;
        if let Some(&v) = self.params.get(&index) {
            return Ok(v);
        }
        let v = self.push(store.by_index(index).value.clone(), Op::Param { index });
        self.params.insert(index, v);
        Ok(v)
    }

    pub fn apply(&mut self, op: OpSpec, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(DifdError::shape(name, format!("{n} inputs"), format!("{} inputs", inputs.len())))
            }
        };
        match op {
            OpSpec::MatMul => {
                arity(2, "matmul")?;
                self.matmul(inputs[0], inputs[1])
            }
            OpSpec::Add => {
                arity(2, "add")?;
                self.add(inputs[0], inputs[1])
            }
            OpSpec::Mul => {
                arity(2, "mul")?;
                self.mul(inputs[0], inputs[1])
            }
            OpSpec::ConcatLastDim => self.concat_last_dim(inputs),
            OpSpec::RowGather(idx) => {
                arity(1, "row_gather")?;
                self.row_gather(inputs[0], &idx)
            }
            OpSpec::Tanh => {
                arity(1, "tanh")?;
                Ok(self.tanh(inputs[0]))
            }
            OpSpec::Sigmoid => {
                arity(1, "sigmoid")?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpSpec::Relu => {
                arity(1, "relu")?;
                Ok(self.relu(inputs[0]))
            }
            OpSpec::MaskedSoftmax(mask) => {
                arity(1, "masked_softmax_lastdim")?;
                self.masked_softmax(inputs[0], &mask)
            }
            OpSpec::Sum => {
                arity(1, "sum")?;
                Ok(self.sum(inputs[0]))
            }
            OpSpec::Mean => {
                arity(1, "mean")?;
                Ok(self.mean(inputs[0]))
            }
            OpSpec::ScalarMul(s) => {
                arity(1, "scalar_mul")?;
                Ok(self.scalar_mul(inputs[0], s))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(DifdError::shape(
                "matmul",
                format!("[m, k] x [k, n] with k = {}", ta.cols()),
                format!("{} x {}", ta.shape_str(), tb.shape_str()),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.cols());
        let t = Tensor::matrix(ta.rows(), tb.cols(), out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else if tb.cols() == 1 && tb.rows() == ta.rows() {
            Ok(Bcast::Col)
        } else {
            Err(DifdError::shape(
                op,
                format!("{}, a row of {}, a column of {} or a scalar", ta.shape_str(), ta.cols(), ta.rows()),
                tb.shape_str(),
            ))
        }
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let mode = self.bcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[mode.index(i, cols)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), out)?, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, m)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, m)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, m) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, m)))
    }

    pub fn concat_last_dim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| DifdError::shape("concat_last_dim", "at least one input", "none"))?;
        let rows = self.value(*first).rows();
        if let Some(bad) = xs.iter().find(|&&v| self.value(v).rows() != rows) {
            return Err(DifdError::shape(
                "concat_last_dim",
                format!("{rows} rows"),
                self.value(*bad).shape_str(),
            ));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatLastDim(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| DifdError::shape("concat_rows", "at least one input", "none"))?;
        let cols = self.value(*first).cols();
        if let Some(bad) = xs.iter().find(|&&v| self.value(v).cols() != cols) {
            return Err(DifdError::shape("concat_rows", format!("{cols} columns"), self.value(*bad).shape_str()));
        }
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let rows = out.len() / cols;
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_last_dim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if len == 0 || start + len > tx.cols() {
            return Err(DifdError::shape(
                "slice_last_dim",
                format!("columns {start}..{} within {}", start + len, tx.cols()),
                tx.shape_str(),
            ));
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(tx.rows(), len, out)?;
        Ok(self.push(t, Op::SliceLastDim { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if len == 0 || start + len > tx.rows() {
            return Err(DifdError::shape(
                "slice_rows",
                format!("rows {start}..{} within {}", start + len, tx.rows()),
                tx.shape_str(),
            ));
        }
        let c = tx.cols();
        let out = tx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, out)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn row_gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if idx.is_empty() {
            return Err(DifdError::shape("row_gather", "at least one index", "none"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= tx.rows()) {
            return Err(DifdError::shape("row_gather", format!("row index < {}", tx.rows()), format!("index {bad}")));
        }
        let mut out = Vec::with_capacity(idx.len() * tx.cols());
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::matrix(idx.len(), tx.cols(), out)?;
        Ok(self.push(t, Op::RowGather { x, idx: idx.to_vec() }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(DifdError::shape("transpose", "2-d tensor", tx.shape_str()));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), out).expect("unary op preserves shape");
        self.push(t, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::ScalarMul(x, s))
    }

    /// Softmax over the trailing dimension restricted to entries where
    /// `mask` is 1; masked entries come out exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(DifdError::shape(
                "masked_softmax_lastdim",
                format!("mask of {} entries", tx.numel()),
                format!("mask of {} entries", mask.len()),
            ));
        }
        let c = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &mk)| mk != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DifdError::EmptySoftmaxSupport { row: r });
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] != 0.0 {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0; tx.numel()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("log_softmax preserves shape");
        self.push(t, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn sum_last_dim(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = (0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect();
        let t = Tensor::matrix(tx.rows(), 1, out).expect("sum_last_dim shape");
        self.push(t, Op::SumLastDim(x))
    }

    /// Reverse sweep from `loss`. Parameters in `freeze` get no gradient;
    /// every other trainable parameter in the store ends up with one (zeros
    /// if the loss does not reach it). Gradients accumulate into the store
    /// and are also returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore, freeze: &[Partition]) -> Result<GradMap> {
        if self.consumed {
            return Err(DifdError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(DifdError::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.shape() != [1] {
            return Err(DifdError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.item().is_finite() {
            return Err(DifdError::NonFinite(format!("loss = {}", lt.item())));
        }

        let live = |index: usize| {
            let p = store.by_index(index);
            p.trainable && !freeze.contains(&p.partition)
        };
        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for k in 0..n {
            needs[k] = match &self.nodes[k].op {
                Op::Constant => false,
                Op::Param { index } => live(*index),
                op => op.inputs().iter().any(|v| needs[v.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for k in (0..n).rev() {
            if !needs[k] {
                continue;
            }
            let Some(mut g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if matches!(node.op, Op::Param { .. }) {
                grads[k] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backprop_node(k, &g, &needs, &mut grads);
        }

        let mut out = GradMap::new();
        for (&index, &v) in &self.params {
            if !needs[v.0] && !live(index) {
                continue;
            }
            let p = store.by_index(index);
            let numel = p.value.numel();
            let g = grads[v.0].take().unwrap_or_else(|| vec![0.0; numel]);
            out.insert(p.name.clone(), Tensor::new(p.value.shape().to_vec(), g)?);
        }
        for i in 0..store.len() {
            let p = store.by_index_mut(i);
            if !p.trainable || freeze.contains(&p.partition) {
                continue;
            }
            let g = out
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let cols = p.value.cols();
            for &r in &p.frozen_rows {
                g.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.data().to_vec()),
            }
        }

        self.consumed = true;
        self.nodes.clear();
        self.params.clear();
        Ok(out)
    }

    fn backprop_node(&self, k: usize, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[k];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !needs[v.0] {
                return;
            }
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, kk, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        for p in 0..kk {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[p * n + j];
                            }
                            ga[i * kk + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        for p in 0..kk {
                            let av = ta.data()[i * kk + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let cols = out.cols();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[mode.index(i, cols)] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = out.cols();
                acc(*a, &mut |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * tb.data()[mode.index(i, cols)];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[mode.index(i, cols)] += gi * ta.data()[i];
                    }
                });
            }
            Op::ConcatLastDim(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    acc(v, &mut |gx| {
                        for r in 0..out.rows() {
                            for j in 0..c {
                                gx[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).numel();
                    acc(v, &mut |gx| {
                        gx.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y);
                    });
                    offset += len;
                }
            }
            Op::SliceLastDim { x, start } => {
                let c = self.value(*x).cols();
                let len = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                });
            }
            Op::RowGather { x, idx } => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                // out is [c, r]; input is [r, c]
                let (r, c) = (out.cols(), out.rows());
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for (i, &y) in out.data().iter().enumerate() {
                    gx[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for (i, &y) in out.data().iter().enumerate() {
                    gx[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |gx| {
                    for (i, &v) in tx.data().iter().enumerate() {
                        if v > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..out.rows() {
                        let gr = &g[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - out.data()[r * c + j].exp() * total;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumLastDim(x) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i / c];
                    }
                });
            }
            Op::ScalarMul(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)),
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
