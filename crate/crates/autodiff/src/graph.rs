//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound from a [`ParamStore`] as leaves; [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of every reachable node, which can then be
//! accumulated into the store.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param { tag: u64, id: ParamId },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MeanPool { x: Var, seq: usize },
    RepeatRows { x: Var, times: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    Pick { x: Var, indices: Vec<usize> },
    Bmm { a: Var, b: Var, trans_b: bool },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    StraightThrough { embedding: Var },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddTiled(..) => "add_tiled",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::MeanPool { .. } => "mean_pool",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Bmm { .. } => "bmm",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::StraightThrough { .. } => "straight_through",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, u64, ParamId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reachable.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Adds the gradients of every parameter bound from `store` into its accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let tag = store.tag();
        for &(node, t, id) in &self.params {
            if t != tag {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                let acc = store.get_mut(id).grad.data_mut();
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    fault: Option<(usize, &'static str)>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, fault: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First node whose forward value contained NaN or infinity.
    pub fn fault(&self) -> Option<AutodiffError> {
        self.fault.map(|(node, op)| AutodiffError::NonFinite { op, node })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param { tag: store.tag(), id }, true)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// Binds a parameter value as a constant (e.g. frozen target networks).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.input(store.value(id).clone())
    }

    /// Detached copy of `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.len() != tx.cols() {
            return Err(mismatch(op, tx, tr));
        }
        Ok(())
    }

    /// `x + b` with `b` (length = last axis of `x`) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % c]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddRow(x, b), ng))
    }

    /// `x * g` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g)?;
        let (tx, tg) = (self.value(x), self.value(g));
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * tg.data()[i % c]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(t, Op::MulRow(x, g), ng))
    }

    /// `x[g*s, d] + p[s, d]`, tiling `p` over consecutive groups of `s` rows.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(p));
        if tx.cols() != tp.cols() || tx.rows() % tp.rows() != 0 {
            return Err(mismatch("add_tiled", tx, tp));
        }
        let block = tp.len();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tp.data()[i % block]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(p);
        Ok(self.push(t, Op::AddTiled(x, p), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(t, Op::Exp(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(t, Op::Square(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    /// Normalizes each row (last axis) to zero mean and unit variance; no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(tx.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, rstd }, ng)
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales survivors
    /// by `1/(1-p)` in training mode; identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        self.dropout_with_mask(x, p, |_| rng.random::<f64>())
    }

    fn dropout_with_mask(&mut self, x: Var, p: f64, mut draw: impl FnMut(usize) -> f64) -> Result<Var> {
        let keep = 1.0 - p;
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len()).map(|i| if draw(i) < p { 0.0 } else { 1.0 / keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat", self.value(*first), self.value(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = self.value(*first).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum over the last axis, giving `[rows, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().chunks(t.cols()).map(|r| r.iter().sum()).collect();
        let n = data.len();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, 1], data).expect("shape"), Op::RowSum(x), ng)
    }

    /// Adaptive mean-pool over a sequence axis: `[g*seq, d] -> [g, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let t = self.value(x);
        if seq == 0 || t.rows() % seq != 0 {
            return Err(invalid("mean_pool", format!("{} rows not divisible by sequence length {seq}", t.rows())));
        }
        let (d, g) = (t.cols(), t.rows() / seq);
        let mut out = vec![0.0; g * d];
        for (r, row) in t.data().chunks(d).enumerate() {
            let dst = &mut out[(r / seq) * d..(r / seq + 1) * d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v / seq as f64;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![g, d], out)?, Op::MeanPool { x, seq }, ng))
    }

    /// Repeats every row `times` times consecutively: `[g, d] -> [g*times, d]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(invalid("repeat_rows", "times must be positive"));
        }
        let t = self.value(x);
        let d = t.cols();
        let mut out = Vec::with_capacity(t.len() * times);
        for row in t.data().chunks(d) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let shape = vec![t.rows() * times, d];
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::RepeatRows { x, times }, ng))
    }

    /// Selects rows of a `[n, d]` tensor.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        if indices.is_empty() {
            return Err(invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![indices.len(), d], out)?, Op::GatherRows { x, indices: indices.to_vec() }, ng))
    }

    /// `out[i] = x[i, indices[i]]`, shape `[n, 1]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, k) = (t.rows(), t.cols());
        if indices.len() != n {
            return Err(invalid("pick", format!("{} indices for {n} rows", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(invalid("pick", format!("column {bad} out of range for {k} columns")));
        }
        let out = indices.iter().enumerate().map(|(r, &c)| t.data()[r * k + c]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::Pick { x, indices: indices.to_vec() }, ng))
    }

    /// Batched matmul `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(mismatch("bmm", ta, tb));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b { (tb.shape()[2], tb.shape()[1]) } else { (tb.shape()[1], tb.shape()[2]) };
        if kb != k {
            return Err(mismatch("bmm", ta, tb));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, trans_b }, ng))
    }

    /// `[batch*seq, heads*dh] -> [batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if heads == 0 || t.rows() != batch * seq || t.cols() % heads != 0 {
            return Err(invalid("split_heads", format!("shape {:?} vs batch {batch}, seq {seq}, heads {heads}", t.shape())));
        }
        let dh = t.cols() / heads;
        let mut out = vec![0.0; t.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * heads * dh + h * dh;
                    let dst = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![batch * heads, seq, dh], out)?, Op::SplitHeads { x, batch, seq, heads }, ng))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 || t.shape()[0] != batch * heads || t.shape()[1] != seq {
            return Err(invalid("merge_heads", format!("shape {:?} vs batch {batch}, seq {seq}, heads {heads}", t.shape())));
        }
        let dh = t.shape()[2];
        let mut out = vec![0.0; t.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + s) * heads * dh + h * dh;
                    let src = ((b * heads + h) * seq + s) * dh;
                    out[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![batch * seq, heads * dh], out)?, Op::MergeHeads { x, batch, seq, heads }, ng))
    }

    /// Forward value is `quantized` (copied bit-exactly); the backward pass hands
    /// the upstream gradient to `embedding` unchanged and nothing to `quantized`.
    pub fn straight_through(&mut self, embedding: Var, quantized: Var) -> Result<Var> {
        let (te, tq) = (self.value(embedding), self.value(quantized));
        if te.shape() != tq.shape() {
            return Err(mismatch("straight_through", te, tq));
        }
        let t = tq.clone();
        let ng = self.ng(embedding);
        Ok(self.push(t, Op::StraightThrough { embedding }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Sinusoidal embedding of (possibly fractional) positions; constant input.
    pub fn sinusoidal(&mut self, positions: &[f64], dim: usize) -> Result<Var> {
        Ok(self.input(sinusoidal_embedding(positions, dim)?))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.is_finite() {
            return Err(AutodiffError::NonFinite { op: self.nodes[loss.0].op.name(), node: loss.0 });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if let Op::Param { tag, id } = node.op {
                if grads[i].is_some() {
                    params.push((i, tag, id));
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    /// Runs [`Graph::backward`] and accumulates into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(store);
        Ok(g)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let ga = slot(grads, *a, ta.len());
                    gemm(m, n, k, g, false, tb.data(), true, ga, true);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, tb.len());
                    gemm(k, m, n, ta.data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(tb).map(|(g, y)| g * y));
                self.acc(grads, *b, g.iter().zip(ta).map(|(g, x)| g * x));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.iter().copied());
                if self.ng(*b) {
                    let c = out.cols();
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let c = out.cols();
                self.acc(grads, *x, g.iter().enumerate().map(|(j, v)| v * tw.data()[j % c]));
                if self.ng(*w) {
                    let gw = slot(grads, *w, c);
                    for (gr, xr) in g.chunks(c).zip(tx.data().chunks(c)) {
                        for j in 0..c {
                            gw[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::AddTiled(x, p) => {
                self.acc(grads, *x, g.iter().copied());
                if self.ng(*p) {
                    let block = self.value(*p).len();
                    let gp = slot(grads, *p, block);
                    for chunk in g.chunks(block) {
                        gp.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|v| v * c)),
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(tx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }));
            }
            Op::Exp(x) => self.acc(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * y)),
            Op::Square(x) => {
                let tx = self.value(*x).data();
                self.acc(grads, *x, g.iter().zip(tx).map(|(g, v)| 2.0 * g * v));
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, y)| gv - y.exp() * s));
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::LayerNorm { x, rstd } => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), r) in g.chunks(c).zip(out.data().chunks(c)).zip(rstd) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend(gr.iter().zip(yr).map(|(gv, y)| r * (gv - mg - y * mgy)));
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m)),
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let gp = slot(grads, p, self.value(p).len());
                        for (dst, src) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            dst.iter_mut().zip(&src[offset..offset + w]).for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols();
                let n = self.value(*x).len();
                self.acc(grads, *x, (0..n).map(|j| g[j / c]));
            }
            Op::MeanPool { x, seq } => {
                let d = out.cols();
                let n = self.value(*x).len();
                let s = *seq as f64;
                self.acc(grads, *x, (0..n).map(|j| g[(j / d / seq) * d + j % d] / s));
            }
            Op::RepeatRows { x, times } => {
                if self.ng(*x) {
                    let d = out.cols();
                    let gx = slot(grads, *x, self.value(*x).len());
                    for (r, row) in g.chunks(d).enumerate() {
                        let dst = &mut gx[(r / times) * d..(r / times + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                if self.ng(*x) {
                    let d = out.cols();
                    let gx = slot(grads, *x, self.value(*x).len());
                    for (row, &i) in g.chunks(d).zip(indices) {
                        gx[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Pick { x, indices } => {
                if self.ng(*x) {
                    let k = self.value(*x).cols();
                    let gx = slot(grads, *x, self.value(*x).len());
                    for (r, &c) in indices.iter().enumerate() {
                        gx[r * k + c] += g[r];
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.ng(*a) {
                    let ga = slot(grads, *a, ta.len());
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC * B^T, or dC * B when B was used transposed.
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, tb.len());
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                if self.ng(*x) {
                    let dh = out.shape()[2];
                    let gx = slot(grads, *x, out.len());
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let dst = (b * seq + s) * heads * dh + h * dh;
                                let src = ((b * heads + h) * seq + s) * dh;
                                gx[dst..dst + dh].iter_mut().zip(&g[src..src + dh]).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                if self.ng(*x) {
                    let dh = out.cols() / heads;
                    let gx = slot(grads, *x, out.len());
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let src = (b * seq + s) * heads * dh + h * dh;
                                let dst = ((b * heads + h) * seq + s) * dh;
                                gx[dst..dst + dh].iter_mut().zip(&g[src..src + dh]).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
            }
            Op::StraightThrough { embedding } => self.acc(grads, *embedding, g.iter().copied()),
            Op::Reshape(x) => self.acc(grads, *x, g.iter().copied()),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, values: impl Iterator<Item = f64>) {
        if !self.ng(v) {
            return;
        }
        let n = self.value(v).len();
        let dst = slot(grads, v, n);
        for (a, b) in dst.iter_mut().zip(values) {
            *a += b;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Transformer-style sinusoidal features: `[sin(p w_0), .., sin(p w_{h-1}), cos(p w_0), ..]`
/// with `w_i = 10000^(-i/(h-1))` and `h = dim/2`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 || positions.is_empty() {
        return Err(invalid("sinusoidal", format!("dim {dim} must be even and >= 2 with at least one position")));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / denom).exp()).collect();
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        out.extend(freqs.iter().map(|w| (p * w).sin()));
        out.extend(freqs.iter().map(|w| (p * w).cos()));
    }
    Tensor::new(vec![positions.len(), dim], out)
}
