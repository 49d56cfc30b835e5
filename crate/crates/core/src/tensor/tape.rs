use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::gemm::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static SIGN_FLIP: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Negates the backward rule of the named op on this thread.
///
/// Test fixture for the gradient checker: with a fault injected, every
/// parameter upstream of that op must show up as a mismatch.
#[doc(hidden)]
pub fn inject_sign_flip(op: Option<&'static str>) {
    SIGN_FLIP.with(|c| c.set(op));
}

fn sign_flipped(op: &'static str) -> bool {
    SIGN_FLIP.with(|c| c.get() == Some(op))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    MulCol { a: usize, s: usize },
    Scale { a: usize, c: f64 },
    DivScalar { a: usize, s: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    L2Normalize { a: usize, norms: Vec<f64> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Sum { a: usize },
    Mean { a: usize },
    RowPool { a: usize, groups: Vec<(usize, usize)>, mode: PoolMode, argmax: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    Reshape { a: usize },
    BroadcastBatch { a: usize },
    GatherCols { a: usize, idx: Vec<usize> },
    GatherRows { a: usize, rows: Vec<usize> },
    ScatterRows { a: usize, rows: Vec<usize> },
    GatherEntries { a: usize, entries: Vec<(usize, usize)> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::Scale { .. } => "scale",
            Op::DivScalar { .. } => "div_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowPool { .. } => "row_pool",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape { .. } => "reshape",
            Op::BroadcastBatch { .. } => "broadcast_batch",
            Op::GatherCols { .. } => "gather_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::GatherEntries { .. } => "gather_entries",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { a, bias } => vec![*a, *bias],
            Op::MulCol { a, s } | Op::DivScalar { a, s } => vec![*a, *s],
            Op::ConcatCols { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Softmax { a }
            | Op::LayerNorm { a, .. }
            | Op::L2Normalize { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::RowPool { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a }
            | Op::BroadcastBatch { a }
            | Op::GatherCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::ScatterRows { a, .. }
            | Op::GatherEntries { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf that receives a gradient but is not a stored parameter.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Registers a stored parameter; repeated calls return the same leaf so
    /// that reuse accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push_leaf(store.value(id).clone(), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|&i| self.needs_grad(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }
}

/// Splits a rank-2 or rank-3 shape into (batch, rows, cols).
fn as_batched(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::dims(op, shape, &[])),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.data()[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading dims are flattened into rows.
    pub fn matmul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(b);
        let (av, bv) = (self.value(), b.value());
        if bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let (rows, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.tape
            .push(Tensor::new(shape, out)?, Op::MatMul { a: self.id, b: b.id })
    }

    fn bmm_impl(&self, b: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(b);
        let (av, bv) = (self.value(), b.value());
        let op = if trans_b { "bmm_nt" } else { "bmm" };
        let (ba, m, k) = as_batched(op, av.shape())?;
        let (bb, r1, r2) = as_batched(op, bv.shape())?;
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb || av.rank() != bv.rank() {
            return Err(Error::dims(op, av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if av.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::Bmm {
                a: self.id,
                b: b.id,
                trans_b,
            },
        )
    }

    /// Batched product `[B,m,k] · [B,k,n]`; rank-2 operands act as B = 1.
    pub fn bmm(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(b, false)
    }

    /// Batched product with the right operand transposed: `[B,m,k] · [B,n,k]ᵀ`.
    pub fn bmm_nt(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(b, true)
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let av = self.value();
        let (bs, m, n) = as_batched("transpose", av.shape())?;
        let mut out = vec![0.0; av.numel()];
        let d = av.data();
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = d[b * m * n + i * n + j];
                }
            }
        }
        let shape = if av.rank() == 2 { vec![n, m] } else { vec![bs, n, m] };
        self.tape
            .push(Tensor::new(shape, out)?, Op::Transpose { a: self.id })
    }

    fn zip_same(
        &self,
        b: &Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(b);
        let (av, bv) = (self.value(), b.value());
        if av.shape() != bv.shape() {
            return Err(Error::dims(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(b, "add", |x, y| x + y)?;
        self.tape.push(t, Op::Add { a: self.id, b: b.id })
    }

    pub fn sub(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(b, "sub", |x, y| x - y)?;
        self.tape.push(t, Op::Sub { a: self.id, b: b.id })
    }

    pub fn mul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let t = self.zip_same(b, "mul", |x, y| x * y)?;
        self.tape.push(t, Op::Mul { a: self.id, b: b.id })
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let (av, bv) = (self.value(), bias.value());
        let n = av.cols();
        if bv.numel() != n {
            return Err(Error::dims("add_row", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
        )
    }

    /// Multiplies each row by the matching entry of a one-column tensor.
    pub fn mul_col(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let (av, sv) = (self.value(), s.value());
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return Err(Error::dims("mul_col", av.shape(), sv.shape()));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for (row, &k) in data.chunks_mut(n.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::MulCol { a: self.id, s: s.id },
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let av = self.value();
        let data = av.data().iter().map(|x| x * c).collect();
        self.tape
            .push(Tensor::new(av.shape().to_vec(), data)?, Op::Scale { a: self.id, c })
    }

    /// Divides every entry by a one-element tensor.
    pub fn div_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s);
        let (av, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(Error::dims("div_scalar", av.shape(), sv.shape()));
        }
        let d = sv.data()[0];
        let data = av.data().iter().map(|x| x / d).collect();
        self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::DivScalar { a: self.id, s: s.id },
        )
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let av = self.value();
        let data = av.data().iter().map(|x| x.max(0.0)).collect();
        self.tape
            .push(Tensor::new(av.shape().to_vec(), data)?, Op::Relu { a: self.id })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let av = self.value();
        let data = av.data().iter().map(|&x| stable_sigmoid(x)).collect();
        self.tape
            .push(Tensor::new(av.shape().to_vec(), data)?, Op::Sigmoid { a: self.id })
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let av = self.value();
        let n = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.tape
            .push(Tensor::new(av.shape().to_vec(), data)?, Op::Softmax { a: self.id })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&self) -> Result<Var<'t>> {
        const EPS: f64 = 1e-5;
        let av = self.value();
        let n = av.cols();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::LayerNorm { a: self.id, inv_std },
        )
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let av = self.value();
        let n = av.cols();
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        self.tape.push(
            Tensor::new(av.shape().to_vec(), data)?,
            Op::L2Normalize { a: self.id, norms },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        if av.rank() != 2 || av.rows() != labels.len() {
            return Err(Error::dims("cross_entropy", av.shape(), &[labels.len()]));
        }
        let c = av.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("cross_entropy: empty batch"));
        }
        let mut probs = av.data().to_vec();
        let mut total = 0.0;
        for (row, (&label, logits)) in probs
            .chunks_mut(c)
            .zip(labels.iter().zip(av.data().chunks(c)))
        {
            total += log_sum_exp(logits) - logits[label];
            softmax_in_place(row);
        }
        let loss = total / labels.len() as f64;
        self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let av = self.value();
        if av.numel() == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Pools groups of rows `(start, len)` within each batch item:
    /// `[B, L, d] -> [B, groups, d]` (rank-2 input acts as B = 1).
    pub fn row_pool(&self, groups: &[(usize, usize)], mode: PoolMode) -> Result<Var<'t>> {
        let av = self.value();
        let (bs, l, d) = as_batched("row_pool", av.shape())?;
        if groups.iter().any(|&(s, n)| n == 0 || s + n > l) {
            return Err(Error::dims("row_pool", av.shape(), &[groups.len()]));
        }
        let g = groups.len();
        let mut out = vec![0.0; bs * g * d];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; bs * g * d];
        }
        let x = av.data();
        for b in 0..bs {
            for (gi, &(start, len)) in groups.iter().enumerate() {
                let o = (b * g + gi) * d;
                for j in 0..d {
                    match mode {
                        PoolMode::Mean => {
                            let s: f64 = (start..start + len).map(|r| x[(b * l + r) * d + j]).sum();
                            out[o + j] = s / len as f64;
                        }
                        PoolMode::Max => {
                            let mut best = start;
                            for r in start + 1..start + len {
                                if x[(b * l + r) * d + j] > x[(b * l + best) * d + j] {
                                    best = r;
                                }
                            }
                            out[o + j] = x[(b * l + best) * d + j];
                            argmax[o + j] = best;
                        }
                    }
                }
            }
        }
        let shape = if av.rank() == 2 { vec![g, d] } else { vec![bs, g, d] };
        self.tape.push(
            Tensor::new(shape, out)?,
            Op::RowPool {
                a: self.id,
                groups: groups.to_vec(),
                mode,
                argmax,
            },
        )
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values[1..] {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::dims("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let rows = values[0].rows();
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        first.tape.push(
            Tensor::new(shape, out)?,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let av = self.value();
        let n = av.cols();
        if start + len > n {
            return Err(Error::dims("slice_cols", av.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(n.max(1)) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.tape
            .push(Tensor::new(shape, out)?, Op::SliceCols { a: self.id, start })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = (*self.value()).clone().reshape(shape)?;
        self.tape.push(t, Op::Reshape { a: self.id })
    }

    /// Repeats a rank-2 tensor along a new leading batch dimension.
    pub fn broadcast_batch(&self, batch: usize) -> Result<Var<'t>> {
        let av = self.value();
        if av.rank() != 2 {
            return Err(Error::dims("broadcast_batch", av.shape(), &[batch]));
        }
        let mut out = Vec::with_capacity(av.numel() * batch);
        for _ in 0..batch {
            out.extend_from_slice(av.data());
        }
        let shape = vec![batch, av.shape()[0], av.shape()[1]];
        self.tape
            .push(Tensor::new(shape, out)?, Op::BroadcastBatch { a: self.id })
    }

    /// `[R, C] -> [R, k]` picking `idx[r*k + j]` from row `r`.
    pub fn gather_cols(&self, idx: &[usize], k: usize) -> Result<Var<'t>> {
        let av = self.value();
        let (r, c) = (av.rows(), av.cols());
        if av.rank() != 2 || idx.len() != r * k || idx.iter().any(|&i| i >= c) {
            return Err(Error::dims("gather_cols", av.shape(), &[idx.len()]));
        }
        let out = idx
            .iter()
            .enumerate()
            .map(|(p, &i)| av.data()[(p / k) * c + i])
            .collect();
        self.tape.push(
            Tensor::new(vec![r, k], out)?,
            Op::GatherCols {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// `[R, C] -> [rows.len(), C]`.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let av = self.value();
        if av.rank() != 2 || rows.iter().any(|&r| r >= av.rows()) {
            return Err(Error::dims("gather_rows", av.shape(), &[rows.len()]));
        }
        let mut out = Vec::with_capacity(rows.len() * av.cols());
        for &r in rows {
            out.extend_from_slice(av.row(r));
        }
        self.tape.push(
            Tensor::new(vec![rows.len(), av.cols()], out)?,
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// `[n, C] -> [total, C]`, adding row `i` into output row `rows[i]`.
    pub fn scatter_rows(&self, rows: &[usize], total: usize) -> Result<Var<'t>> {
        let av = self.value();
        if av.rank() != 2 || av.rows() != rows.len() || rows.iter().any(|&r| r >= total) {
            return Err(Error::dims("scatter_rows", av.shape(), &[rows.len(), total]));
        }
        let c = av.cols();
        let mut out = vec![0.0; total * c];
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c]
                .iter_mut()
                .zip(av.row(i))
                .for_each(|(o, x)| *o += x);
        }
        self.tape.push(
            Tensor::new(vec![total, c], out)?,
            Op::ScatterRows {
                a: self.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Picks single entries `(row, col)` into an `[n, 1]` column.
    pub fn gather_entries(&self, entries: &[(usize, usize)]) -> Result<Var<'t>> {
        let av = self.value();
        let c = av.cols();
        if av.rank() != 2 || entries.iter().any(|&(r, j)| r >= av.rows() || j >= c) {
            return Err(Error::dims("gather_entries", av.shape(), &[entries.len()]));
        }
        let out = entries.iter().map(|&(r, j)| av.data()[r * c + j]).collect();
        self.tape.push(
            Tensor::new(vec![entries.len(), 1], out)?,
            Op::GatherEntries {
                a: self.id,
                entries: entries.to_vec(),
            },
        )
    }

    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        let tape = self.tape;
        let nodes = tape.nodes.borrow();
        if nodes[self.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward called on non-scalar of shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut contribs = local_grads(&nodes, node, &g);
            if sign_flipped(node.op.name()) {
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (input, c) in contribs {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }
        let params = tape
            .params
            .borrow()
            .iter()
            .map(|(&p, &n)| (p, n))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value, if it was reached.
    pub fn wrt(&self, var: &Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[*n].as_deref())
    }

    /// Adds every reached parameter gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut params = self.params.clone();
        params.sort();
        for (id, node) in params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn local_grads(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].needs_grad;
    let y = &node.value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (rows, k, n) = (av.rows(), av.cols(), bv.cols());
            if wants(*a) {
                let mut da = vec![0.0; rows * k];
                gemm(rows, n, k, g, false, bv.data(), true, &mut da, false);
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, rows, n, av.data(), true, g, false, &mut db, false);
                out.push((*b, db));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k) = as_batched("bmm", av.shape()).expect("checked in forward");
            let n = y.cols();
            let (sa, sb, sy) = (m * k, k * n, m * n);
            if wants(*a) {
                let mut da = vec![0.0; av.numel()];
                for i in 0..bs {
                    let (gi, bi) = (&g[i * sy..(i + 1) * sy], &bv.data()[i * sb..(i + 1) * sb]);
                    // a·b: da = g·bᵀ ; a·bᵀ: da = g·b
                    gemm(m, n, k, gi, false, bi, !*trans_b, &mut da[i * sa..(i + 1) * sa], false);
                }
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; bv.numel()];
                for i in 0..bs {
                    let (gi, ai) = (&g[i * sy..(i + 1) * sy], &av.data()[i * sa..(i + 1) * sa]);
                    let dbi = &mut db[i * sb..(i + 1) * sb];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, dbi, false);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dbi, false);
                    }
                }
                out.push((*b, db));
            }
        }
        Op::Transpose { a } => {
            if wants(*a) {
                let (bs, m, n) = as_batched("transpose", val(*a).shape()).expect("checked");
                let mut da = vec![0.0; g.len()];
                for b in 0..bs {
                    for i in 0..m {
                        for j in 0..n {
                            da[b * m * n + i * n + j] = g[b * m * n + j * m + i];
                        }
                    }
                }
                out.push((*a, da));
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*b) {
                out.push((*b, g.to_vec()));
            }
        }
        Op::Sub { a, b } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*b) {
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                out.push((*a, g.iter().zip(bv.data()).map(|(g, b)| g * b).collect()));
            }
            if wants(*b) {
                out.push((*b, g.iter().zip(av.data()).map(|(g, a)| g * a).collect()));
            }
        }
        Op::AddRow { a, bias } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*bias) {
                let n = val(*bias).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((*bias, db));
            }
        }
        Op::MulCol { a, s } => {
            let (av, sv) = (val(*a), val(*s));
            let n = av.cols().max(1);
            if wants(*a) {
                let mut da = g.to_vec();
                for (row, &k) in da.chunks_mut(n).zip(sv.data()) {
                    row.iter_mut().for_each(|v| *v *= k);
                }
                out.push((*a, da));
            }
            if wants(*s) {
                let ds = g
                    .chunks(n)
                    .zip(av.data().chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                out.push((*s, ds));
            }
        }
        Op::Scale { a, c } => {
            if wants(*a) {
                out.push((*a, g.iter().map(|v| v * c).collect()));
            }
        }
        Op::DivScalar { a, s } => {
            let d = val(*s).data()[0];
            if wants(*a) {
                out.push((*a, g.iter().map(|v| v / d).collect()));
            }
            if wants(*s) {
                let dot: f64 = g.iter().zip(y.data()).map(|(g, y)| g * y).sum();
                out.push((*s, vec![-dot / d]));
            }
        }
        Op::Relu { a } => {
            if wants(*a) {
                let da = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*a, da));
            }
        }
        Op::Sigmoid { a } => {
            if wants(*a) {
                let da = g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                out.push((*a, da));
            }
        }
        Op::Softmax { a } => {
            if wants(*a) {
                let n = y.cols().max(1);
                let mut da = vec![0.0; g.len()];
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                out.push((*a, da));
            }
        }
        Op::LayerNorm { a, inv_std } => {
            if wants(*a) {
                let n = y.cols().max(1);
                let mut da = vec![0.0; g.len()];
                for (((dr, gr), yr), inv) in da
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.data().chunks(n))
                    .zip(inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = inv * (g - mg - y * mgy);
                    }
                }
                out.push((*a, da));
            }
        }
        Op::L2Normalize { a, norms } => {
            if wants(*a) {
                let n = y.cols().max(1);
                let mut da = vec![0.0; g.len()];
                for (((dr, gr), yr), norm) in da
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.data().chunks(n))
                    .zip(norms)
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (g - y * dot) / norm;
                    }
                }
                out.push((*a, da));
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if wants(*logits) {
                let c = val(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                out.push((*a, vec![g[0]; val(*a).numel()]));
            }
        }
        Op::Mean { a } => {
            if wants(*a) {
                let n = val(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
        }
        Op::RowPool {
            a,
            groups,
            mode,
            argmax,
        } => {
            if wants(*a) {
                let av = val(*a);
                let (bs, l, d) = as_batched("row_pool", av.shape()).expect("checked");
                let gcount = groups.len();
                let mut da = vec![0.0; av.numel()];
                for b in 0..bs {
                    for (gi, &(start, len)) in groups.iter().enumerate() {
                        let o = (b * gcount + gi) * d;
                        for j in 0..d {
                            match mode {
                                PoolMode::Mean => {
                                    let share = g[o + j] / len as f64;
                                    for r in start..start + len {
                                        da[(b * l + r) * d + j] += share;
                                    }
                                }
                                PoolMode::Max => {
                                    da[(b * l + argmax[o + j]) * d + j] += g[o + j];
                                }
                            }
                        }
                    }
                }
                out.push((*a, da));
            }
        }
        Op::ConcatCols { parts } => {
            let total = y.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let w = pv.cols();
                if wants(p) {
                    let mut dp = Vec::with_capacity(pv.numel());
                    for row in g.chunks(total.max(1)) {
                        dp.extend_from_slice(&row[offset..offset + w]);
                    }
                    out.push((p, dp));
                }
                offset += w;
            }
        }
        Op::SliceCols { a, start } => {
            if wants(*a) {
                let av = val(*a);
                let (n, w) = (av.cols(), y.cols());
                let mut da = vec![0.0; av.numel()];
                for (dr, gr) in da.chunks_mut(n.max(1)).zip(g.chunks(w.max(1))) {
                    dr[*start..*start + w].copy_from_slice(gr);
                }
                out.push((*a, da));
            }
        }
        Op::Reshape { a } => {
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
        }
        Op::BroadcastBatch { a } => {
            if wants(*a) {
                let n = val(*a).numel();
                let mut da = vec![0.0; n];
                for chunk in g.chunks(n.max(1)) {
                    da.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                out.push((*a, da));
            }
        }
        Op::GatherCols { a, idx } => {
            if wants(*a) {
                let av = val(*a);
                let (c, k) = (av.cols(), y.cols());
                let mut da = vec![0.0; av.numel()];
                for (p, &i) in idx.iter().enumerate() {
                    da[(p / k) * c + i] += g[p];
                }
                out.push((*a, da));
            }
        }
        Op::GatherRows { a, rows } => {
            if wants(*a) {
                let av = val(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    da[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
                out.push((*a, da));
            }
        }
        Op::ScatterRows { a, rows } => {
            if wants(*a) {
                let c = y.cols();
                let mut da = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    da.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                out.push((*a, da));
            }
        }
        Op::GatherEntries { a, entries } => {
            if wants(*a) {
                let av = val(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.numel()];
                for (p, &(r, j)) in entries.iter().enumerate() {
                    da[r * c + j] += g[p];
                }
                out.push((*a, da));
            }
        }
    }
    out
}
