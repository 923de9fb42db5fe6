//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and the backward sweep is a single reverse pass. Each op declares which
//! tensors its backward needs ("saves"); values that are neither saved nor
//! referenced by a live [`Var`] are released immediately and their bytes
//! returned to the [`Ledger`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::memory::Ledger;
use crate::tensor::{DType, Tensor};

pub type NodeId = usize;

/// Stable identifier of a model parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Retain saved-for-backward state.
    Record,
    /// Inference: nothing is saved, intermediates die with their handles.
    NoGrad,
}

/// Differentiable operator kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    /// Elementwise add; the second operand may be a row vector broadcast over rows.
    Add,
    Mul,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sigmoid,
    Tanh,
    /// Along the last axis.
    LogSoftmax,
    /// Non-overlapping stacking of `k` consecutive rows; a short tail is
    /// padded by repeating the final row.
    StackFrames {
        k: usize,
    },
    Sum,
    Scale(f64),
    /// `[T,H] x [U,H] -> [T*U,H]` with `out[t*U+u] = a[t] + b[u]`.
    OuterAdd,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::StackFrames { .. } => "stack_frames",
            OpKind::Sum => "sum",
            OpKind::Scale(_) => "scale",
            OpKind::OuterAdd => "outer_add",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Concat { axis } => write!(f, "concat:{axis}"),
            OpKind::Slice { axis, start, len } => write!(f, "slice:{axis}:{start}:{len}"),
            OpKind::StackFrames { k } => write!(f, "stack_frames:{k}"),
            OpKind::Scale(c) => write!(f, "scale:{c}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name[:arg[:arg...]]`, e.g. `matmul`, `concat:1`, `slice:0:2:3`.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::UnknownOp(s.to_string());
        let int = |i: usize| -> Result<usize> { args.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let kind = match (name, args.len()) {
            ("matmul", 0) => OpKind::MatMul,
            ("add", 0) => OpKind::Add,
            ("mul", 0) => OpKind::Mul,
            ("concat", 0) => OpKind::Concat { axis: 0 },
            ("concat", 1) => OpKind::Concat { axis: int(0)? },
            ("slice", 3) => OpKind::Slice {
                axis: int(0)?,
                start: int(1)?,
                len: int(2)?,
            },
            ("sigmoid", 0) => OpKind::Sigmoid,
            ("tanh", 0) => OpKind::Tanh,
            ("log_softmax", 0) => OpKind::LogSoftmax,
            ("stack_frames", 1) => OpKind::StackFrames { k: int(0)? },
            ("sum", 0) => OpKind::Sum,
            ("scale", 1) => OpKind::Scale(args[0].parse().map_err(|_| bad())?),
            ("outer_add", 0) => OpKind::OuterAdd,
            _ => return Err(bad()),
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Kind(OpKind),
    RnntLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GradKey {
    Param(ParamId),
    Input,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    dtype: DType,
    value: Option<Tensor>,
    /// Bytes charged for `value` (zero for parameter leaves).
    value_bytes: usize,
    /// Op-private saved state (the lattice gradient of the transducer loss).
    extra: Option<Tensor>,
    requires_grad: bool,
    handles: usize,
    saved_by: usize,
    saves: Vec<NodeId>,
    key: Option<GradKey>,
}

#[derive(Debug)]
struct Inner {
    mode: Mode,
    nodes: Vec<Node>,
    forward_ops: usize,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    inner: RefCell<Inner>,
    ledger: Ledger,
}

/// Handle to a node on a [`Tape`]. While any handle is alive the node's value
/// stays resident.
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Clone for Var<'_> {
    fn clone(&self) -> Self {
        self.tape.inner.borrow_mut().nodes[self.id].handles += 1;
        Var {
            tape: self.tape,
            id: self.id,
        }
    }
}

impl Drop for Var<'_> {
    fn drop(&mut self) {
        let mut inner = self.tape.inner.borrow_mut();
        inner.nodes[self.id].handles -= 1;
        release_if_dead(&mut inner.nodes[self.id], &self.tape.ledger);
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .clone()
            .expect("live handle keeps value resident")
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .as_ref()
            .expect("live handle keeps value resident")
            .item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }
}

fn release_if_dead(node: &mut Node, ledger: &Ledger) {
    if node.handles == 0 && node.saved_by == 0 && node.value.take().is_some() {
        ledger.free(node.value_bytes);
        node.value_bytes = 0;
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| shape_err(op, format!("expected a 1-D or 2-D tensor, got {:?}", t.shape())))
}

impl Tape {
    pub fn new(ledger: Ledger, mode: Mode) -> Self {
        Self {
            inner: RefCell::new(Inner {
                mode,
                nodes: Vec::new(),
                forward_ops: 0,
            }),
            ledger,
        }
    }

    pub fn mode(&self) -> Mode {
        self.inner.borrow().mode
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Number of non-leaf operations executed so far.
    pub fn forward_ops(&self) -> usize {
        self.inner.borrow().forward_ops
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, tracked: bool, requires_grad: bool, key: Option<GradKey>) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.mode == Mode::Record;
        let value_bytes = if tracked { value.nbytes() } else { 0 };
        self.ledger.alloc(value_bytes);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            dtype: value.dtype(),
            value: Some(value),
            value_bytes,
            extra: None,
            requires_grad,
            handles: 1,
            saved_by: 0,
            saves: Vec::new(),
            key: if requires_grad { key } else { None },
        });
        Ok(Var { tape: self, id })
    }

    /// Register a parameter. Parameter storage is not charged to the ledger.
    pub fn param(&self, id: ParamId, value: &Tensor, trainable: bool) -> Result<Var<'_>> {
        self.push_leaf(value.clone(), false, trainable, Some(GradKey::Param(id)))
    }

    /// A tracked leaf that never requires a gradient (features, one-hots).
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push_leaf(value, true, false, None)
    }

    /// A tracked leaf whose gradient is reported under its node id.
    pub fn input(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.push_leaf(value, true, requires_grad, Some(GradKey::Input))
    }

    fn push_op(
        &self,
        op: Op,
        inputs: &[&Var<'_>],
        value: Tensor,
        extra: Option<Tensor>,
        saves: Vec<NodeId>,
        name: &'static str,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        inner.forward_ops += 1;
        let record = inner.mode == Mode::Record;
        let requires_grad = record && inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
        let id = inner.nodes.len();
        let (saves, extra) = if requires_grad {
            (saves, extra)
        } else {
            (Vec::new(), None)
        };
        let value_bytes = value.nbytes();
        self.ledger.alloc(value_bytes);
        if let Some(e) = &extra {
            self.ledger.alloc(e.nbytes());
        }
        for &s in &saves {
            if s != id {
                inner.nodes[s].saved_by += 1;
            }
        }
        let self_saved = saves.contains(&id);
        inner.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape().to_vec(),
            dtype: value.dtype(),
            value: Some(value),
            value_bytes,
            extra,
            requires_grad,
            handles: 1,
            saved_by: usize::from(self_saved),
            saves,
            key: None,
        });
        Ok(Var { tape: self, id })
    }

    fn value_of(&self, v: &Var<'_>) -> Tensor {
        v.value()
    }

    /// Apply an op by kind. This is the dynamic entry point used by the
    /// gradient checker; the typed helpers below forward here.
    pub fn apply<'t>(&'t self, kind: &OpKind, inputs: &[&Var<'t>]) -> Result<Var<'t>> {
        let name = kind.name();
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::OuterAdd => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(shape_err(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(shape_err(name, "no inputs"));
        }
        let values: Vec<Tensor> = inputs.iter().map(|v| self.value_of(v)).collect();
        let dtype = values[0].dtype();
        if values.iter().any(|v| v.dtype() != dtype) {
            return Err(Error::DType { op: name });
        }
        let next_id = self.len();
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let rg: Vec<bool> = inputs.iter().map(|v| v.requires_grad()).collect();

        let (out, saves) = match kind {
            OpKind::MatMul => {
                let (m, k) = dims2(&values[0], name)?;
                let (k2, n) = dims2(&values[1], name)?;
                if k != k2 {
                    return Err(shape_err(name, format!("[{m},{k}] x [{k2},{n}]")));
                }
                let out = matmul(values[0].data(), values[1].data(), m, k, n);
                let mut saves = Vec::new();
                if rg[1] {
                    saves.push(ids[0]);
                }
                if rg[0] {
                    saves.push(ids[1]);
                }
                (Tensor::from_parts(vec![m, n], out, dtype), saves)
            }
            OpKind::Add => {
                let (a, b) = (&values[0], &values[1]);
                let out = if a.shape() == b.shape() {
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
                } else {
                    let (m, n) = dims2(a, name)?;
                    let (br, bn) = dims2(b, name)?;
                    if br != 1 || bn != n {
                        return Err(shape_err(name, format!("{:?} + {:?}", a.shape(), b.shape())));
                    }
                    let mut out = a.data().to_vec();
                    for row in out.chunks_mut(n).take(m) {
                        for (o, y) in row.iter_mut().zip(b.data()) {
                            *o += y;
                        }
                    }
                    out
                };
                (Tensor::from_parts(a.shape().to_vec(), out, dtype), Vec::new())
            }
            OpKind::Mul => {
                let (a, b) = (&values[0], &values[1]);
                if a.shape() != b.shape() {
                    return Err(shape_err(name, format!("{:?} * {:?}", a.shape(), b.shape())));
                }
                let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                let mut saves = Vec::new();
                if rg[0] {
                    saves.push(ids[1]);
                }
                if rg[1] {
                    saves.push(ids[0]);
                }
                (Tensor::from_parts(a.shape().to_vec(), out, dtype), saves)
            }
            OpKind::Concat { axis } => {
                let dims: Vec<(usize, usize)> = values.iter().map(|v| dims2(v, name)).collect::<Result<_>>()?;
                let out = match axis {
                    0 => {
                        let n = dims[0].1;
                        if dims.iter().any(|d| d.1 != n) {
                            return Err(shape_err(name, "column counts differ"));
                        }
                        let rows = dims.iter().map(|d| d.0).sum();
                        let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
                        Tensor::from_parts(vec![rows, n], data, dtype)
                    }
                    1 => {
                        let m = dims[0].0;
                        if dims.iter().any(|d| d.0 != m) {
                            return Err(shape_err(name, "row counts differ"));
                        }
                        let cols: usize = dims.iter().map(|d| d.1).sum();
                        let mut data = Vec::with_capacity(m * cols);
                        for r in 0..m {
                            for (v, d) in values.iter().zip(&dims) {
                                data.extend_from_slice(&v.data()[r * d.1..(r + 1) * d.1]);
                            }
                        }
                        Tensor::from_parts(vec![m, cols], data, dtype)
                    }
                    _ => return Err(shape_err(name, format!("axis {axis} out of range"))),
                };
                (out, Vec::new())
            }
            &OpKind::Slice { axis, start, len } => {
                let (m, n) = dims2(&values[0], name)?;
                let extent = if axis == 0 { m } else { n };
                if axis > 1 || len == 0 || start + len > extent {
                    return Err(shape_err(
                        name,
                        format!("slice {start}..{} of axis {axis} in [{m},{n}]", start + len),
                    ));
                }
                let src = values[0].data();
                let out = if axis == 0 {
                    Tensor::from_parts(vec![len, n], src[start * n..(start + len) * n].to_vec(), dtype)
                } else {
                    let data = (0..m)
                        .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
                        .collect();
                    Tensor::from_parts(vec![m, len], data, dtype)
                };
                (out, Vec::new())
            }
            OpKind::Sigmoid => {
                let x = &values[0];
                let data = x.data().iter().map(|&v| sigmoid(v)).collect();
                (Tensor::from_parts(x.shape().to_vec(), data, dtype), vec![next_id])
            }
            OpKind::Tanh => {
                let x = &values[0];
                let data = x.data().iter().map(|v| v.tanh()).collect();
                (Tensor::from_parts(x.shape().to_vec(), data, dtype), vec![next_id])
            }
            OpKind::LogSoftmax => {
                let (_, n) = dims2(&values[0], name)?;
                let mut data = values[0].data().to_vec();
                for row in data.chunks_mut(n) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                (
                    Tensor::from_parts(values[0].shape().to_vec(), data, dtype),
                    vec![next_id],
                )
            }
            &OpKind::StackFrames { k } => {
                let (t, d) = dims2(&values[0], name)?;
                if k == 0 {
                    return Err(shape_err(name, "stack factor must be positive"));
                }
                let out_t = t.div_ceil(k);
                let src = values[0].data();
                let mut data = Vec::with_capacity(out_t * k * d);
                for i in 0..out_t {
                    for j in 0..k {
                        let r = (i * k + j).min(t - 1);
                        data.extend_from_slice(&src[r * d..(r + 1) * d]);
                    }
                }
                (Tensor::from_parts(vec![out_t, k * d], data, dtype), Vec::new())
            }
            OpKind::Sum => {
                let s = values[0].data().iter().sum();
                (Tensor::from_parts(vec![1, 1], vec![s], dtype), Vec::new())
            }
            &OpKind::Scale(c) => {
                let x = &values[0];
                let data = x.data().iter().map(|v| v * c).collect();
                (Tensor::from_parts(x.shape().to_vec(), data, dtype), Vec::new())
            }
            OpKind::OuterAdd => {
                let (t, h) = dims2(&values[0], name)?;
                let (u, h2) = dims2(&values[1], name)?;
                if h != h2 {
                    return Err(shape_err(name, format!("[{t},{h}] (+) [{u},{h2}]")));
                }
                let (a, b) = (values[0].data(), values[1].data());
                let mut data = Vec::with_capacity(t * u * h);
                for ti in 0..t {
                    for ui in 0..u {
                        data.extend(
                            a[ti * h..(ti + 1) * h]
                                .iter()
                                .zip(&b[ui * h..(ui + 1) * h])
                                .map(|(x, y)| x + y),
                        );
                    }
                }
                (Tensor::from_parts(vec![t * u, h], data, dtype), Vec::new())
            }
        };
        self.push_op(Op::Kind(kind.clone()), inputs, out, None, saves, name)
    }

    pub fn matmul<'t>(&'t self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::MatMul, &[a, b])
    }

    pub fn add<'t>(&'t self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::Add, &[a, b])
    }

    pub fn mul<'t>(&'t self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::Mul, &[a, b])
    }

    pub fn concat<'t>(&'t self, parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.apply(&OpKind::Concat { axis }, parts)
    }

    pub fn slice<'t>(&'t self, x: &Var<'t>, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.apply(&OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn sigmoid<'t>(&'t self, x: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::Sigmoid, &[x])
    }

    pub fn tanh<'t>(&'t self, x: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::Tanh, &[x])
    }

    pub fn log_softmax<'t>(&'t self, x: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::LogSoftmax, &[x])
    }

    pub fn stack_frames<'t>(&'t self, x: &Var<'t>, k: usize) -> Result<Var<'t>> {
        self.apply(&OpKind::StackFrames { k }, &[x])
    }

    pub fn sum<'t>(&'t self, x: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::Sum, &[x])
    }

    pub fn scale<'t>(&'t self, x: &Var<'t>, c: f64) -> Result<Var<'t>> {
        self.apply(&OpKind::Scale(c), &[x])
    }

    pub fn outer_add<'t>(&'t self, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.apply(&OpKind::OuterAdd, &[a, b])
    }

    /// Transducer negative log-likelihood of `labels` given log-probabilities
    /// laid out as `[frames * (labels.len()+1), vocab+1]`.
    pub fn rnnt_loss<'t>(&'t self, log_probs: &Var<'t>, labels: &[usize], frames: usize) -> Result<Var<'t>> {
        let lp = self.value_of(log_probs);
        let (rows, classes) = dims2(&lp, "rnnt_loss")?;
        let u1 = labels.len() + 1;
        if frames == 0 || rows != frames * u1 {
            return Err(shape_err(
                "rnnt_loss",
                format!("{rows} rows for {frames} frames x {u1} label positions"),
            ));
        }
        let (nll, grad) = loss::lattice_loss(lp.data(), frames, labels.len(), classes, labels)?;
        let dtype = lp.dtype();
        let extra = Tensor::from_parts(vec![rows, classes], grad, dtype);
        let out = Tensor::from_parts(vec![1, 1], vec![nll], dtype);
        self.push_op(Op::RnntLoss, &[log_probs], out, Some(extra), Vec::new(), "rnnt_loss")
    }

    /// Run the reverse sweep from `loss`, consuming the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        self.backward_seeded(loss, None)
    }

    /// Reverse sweep with an explicit upstream gradient for `output`
    /// (any shape); `None` seeds a scalar loss with 1.
    pub fn backward_seeded(self, output: NodeId, seed: Option<Tensor>) -> Result<Gradients> {
        let seed = {
            let inner = self.inner.borrow();
            let Some(node) = inner.nodes.get(output) else {
                return Err(shape_err("backward", format!("node {output} not on tape")));
            };
            match seed {
                Some(s) => s,
                None => {
                    if node.shape.iter().product::<usize>() != 1 {
                        return Err(Error::NonScalarLoss(node.shape.clone()));
                    }
                    Tensor::full(&node.shape, 1.0, node.dtype)
                }
            }
        };
        self.backward_multi(vec![(output, seed)])
    }

    /// Reverse sweep seeded at several outputs at once. Seeds for the same
    /// node must not repeat.
    pub fn backward_multi(self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let ledger = self.ledger.clone();
        let mut inner = self.inner.borrow_mut();
        let n_nodes = inner.nodes.len();
        let mut pending: Vec<Option<Tensor>> = (0..n_nodes).map(|_| None).collect();
        for (output, seed) in seeds {
            let Some(node) = inner.nodes.get(output) else {
                return Err(shape_err("backward", format!("node {output} not on tape")));
            };
            if seed.shape() != node.shape.as_slice() {
                return Err(shape_err("backward", "seed shape differs from output"));
            }
            if pending[output].is_some() {
                return Err(shape_err("backward", format!("node {output} seeded twice")));
            }
            pending[output] = Some(seed);
        }
        for seed in pending.iter().flatten() {
            ledger.alloc(seed.nbytes());
        }
        let mut grads = Gradients::empty(ledger.clone());

        for i in (0..n_nodes).rev() {
            let g = pending[i].take();
            let node = &inner.nodes[i];
            let g = match g {
                Some(g) if !node.requires_grad => {
                    ledger.free(g.nbytes());
                    None
                }
                g => g,
            };
            if let (Some(g), true) = (g, node.requires_grad) {
                match node.key {
                    Some(GradKey::Param(pid)) => grads.insert_param(pid, g),
                    Some(GradKey::Input) => grads.insert_input(i, g),
                    None => {
                        let contribs = local_grads(&inner.nodes, i, &g)?;
                        ledger.free(g.nbytes());
                        for (input, contrib) in contribs {
                            let Some(contrib) = contrib else { continue };
                            ledger.alloc(contrib.nbytes());
                            match &mut pending[input] {
                                Some(acc) => {
                                    let dtype = acc.dtype();
                                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                        *a = dtype.round(*a + c);
                                    }
                                    ledger.free(contrib.nbytes());
                                }
                                slot @ None => *slot = Some(contrib),
                            }
                        }
                    }
                }
            } else if node.requires_grad {
                if let Some(GradKey::Param(pid)) = node.key {
                    let zeros = Tensor::zeros(&node.shape, node.dtype);
                    ledger.alloc(zeros.nbytes());
                    grads.insert_param(pid, zeros);
                }
            }
            // Everything node i saved is no longer needed once it is processed.
            let saves = std::mem::take(&mut inner.nodes[i].saves);
            for s in saves {
                if s != i {
                    inner.nodes[s].saved_by -= 1;
                    release_if_dead(&mut inner.nodes[s], &ledger);
                }
            }
            let node = &mut inner.nodes[i];
            node.saved_by = 0;
            if let Some(e) = node.extra.take() {
                ledger.free(e.nbytes());
            }
            release_if_dead(node, &ledger);
        }
        Ok(grads)
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        let inner = self.inner.get_mut();
        for node in &mut inner.nodes {
            if node.value.take().is_some() {
                self.ledger.free(node.value_bytes);
            }
            if let Some(e) = node.extra.take() {
                self.ledger.free(e.nbytes());
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Vector-Jacobian products of node `i` for each of its inputs that requires a gradient.
fn local_grads(nodes: &[Node], i: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Option<Tensor>)>> {
    let node = &nodes[i];
    let dtype = node.dtype;
    let want = |j: usize| nodes[node.inputs[j]].requires_grad;
    let val = |id: NodeId| -> &Tensor { nodes[id].value.as_ref().expect("saved value resident during backward") };
    let in_shape = |j: usize| nodes[node.inputs[j]].shape.clone();
    let mk = |shape: Vec<usize>, data: Vec<f64>| Tensor::from_parts(shape, data, dtype);
    let gd = g.data();
    let mut out = Vec::with_capacity(node.inputs.len());

    match &node.op {
        Op::Leaf => {}
        Op::RnntLoss => {
            if want(0) {
                let lattice = node.extra.as_ref().expect("loss saves its lattice gradient");
                let s = gd[0];
                let data = lattice.data().iter().map(|v| v * s).collect();
                out.push((node.inputs[0], Some(mk(in_shape(0), data))));
            }
        }
        Op::Kind(kind) => match kind {
            OpKind::MatMul => {
                let (a_id, b_id) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (nodes[a_id].shape[0], nodes[a_id].shape.get(1).copied());
                let (m, k) = match k {
                    Some(k) => (m, k),
                    None => (1, m),
                };
                let n = g.numel() / m;
                if want(0) {
                    let bt = transpose(val(b_id).data(), k, n);
                    out.push((a_id, Some(mk(in_shape(0), matmul(gd, &bt, m, n, k)))));
                }
                if want(1) {
                    let at = transpose(val(a_id).data(), m, k);
                    out.push((b_id, Some(mk(in_shape(1), matmul(&at, gd, k, m, n)))));
                }
            }
            OpKind::Add => {
                if want(0) {
                    out.push((node.inputs[0], Some(g.clone())));
                }
                if want(1) {
                    let bs = in_shape(1);
                    if bs == node.shape {
                        out.push((node.inputs[1], Some(g.clone())));
                    } else {
                        let n: usize = bs.iter().product();
                        let mut acc = vec![0.0; n];
                        for row in gd.chunks(n) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        out.push((node.inputs[1], Some(mk(bs, acc))));
                    }
                }
            }
            OpKind::Mul => {
                let (a_id, b_id) = (node.inputs[0], node.inputs[1]);
                if want(0) {
                    let d = gd.iter().zip(val(b_id).data()).map(|(x, y)| x * y).collect();
                    out.push((a_id, Some(mk(in_shape(0), d))));
                }
                if want(1) {
                    let d = gd.iter().zip(val(a_id).data()).map(|(x, y)| x * y).collect();
                    out.push((b_id, Some(mk(in_shape(1), d))));
                }
            }
            OpKind::Concat { axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for (j, &inp) in node.inputs.iter().enumerate() {
                    let s = in_shape(j);
                    let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                    if want(j) {
                        let data = if *axis == 0 {
                            gd[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            (0..r)
                                .flat_map(|row| gd[row * cols + offset..row * cols + offset + c].iter().copied())
                                .collect()
                        };
                        out.push((inp, Some(mk(s.clone(), data))));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            &OpKind::Slice { axis, start, len } => {
                if want(0) {
                    let s = in_shape(0);
                    let (m, n) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                    let mut data = vec![0.0; m * n];
                    if axis == 0 {
                        data[start * n..(start + len) * n].copy_from_slice(gd);
                    } else {
                        for r in 0..m {
                            data[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                        }
                    }
                    out.push((node.inputs[0], Some(mk(s, data))));
                }
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::LogSoftmax => {
                if want(0) {
                    let y = val(i).data();
                    let data = match kind {
                        OpKind::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        OpKind::Tanh => gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        _ => {
                            let n = *node.shape.last().expect("non-empty shape");
                            let mut data = Vec::with_capacity(gd.len());
                            for (grow, yrow) in gd.chunks(n).zip(y.chunks(n)) {
                                let gsum: f64 = grow.iter().sum();
                                data.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * gsum));
                            }
                            data
                        }
                    };
                    out.push((node.inputs[0], Some(mk(in_shape(0), data))));
                }
            }
            &OpKind::StackFrames { k } => {
                if want(0) {
                    let s = in_shape(0);
                    let (t, d) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                    let mut data = vec![0.0; t * d];
                    let out_t = node.shape[0];
                    for i2 in 0..out_t {
                        for j in 0..k {
                            let r = (i2 * k + j).min(t - 1);
                            let src = &gd[(i2 * k + j) * d..(i2 * k + j + 1) * d];
                            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    out.push((node.inputs[0], Some(mk(s, data))));
                }
            }
            OpKind::Sum => {
                if want(0) {
                    let s = in_shape(0);
                    let n = s.iter().product();
                    out.push((node.inputs[0], Some(mk(s, vec![gd[0]; n]))));
                }
            }
            &OpKind::Scale(c) => {
                if want(0) {
                    out.push((
                        node.inputs[0],
                        Some(mk(in_shape(0), gd.iter().map(|v| v * c).collect())),
                    ));
                }
            }
            OpKind::OuterAdd => {
                let (sa, sb) = (in_shape(0), in_shape(1));
                let (t, h) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
                let u = sb.iter().product::<usize>() / h;
                if want(0) {
                    let mut data = vec![0.0; t * h];
                    for ti in 0..t {
                        for ui in 0..u {
                            let row = &gd[(ti * u + ui) * h..(ti * u + ui + 1) * h];
                            for (o, v) in data[ti * h..(ti + 1) * h].iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    out.push((node.inputs[0], Some(mk(sa, data))));
                }
                if want(1) {
                    let mut data = vec![0.0; u * h];
                    for ti in 0..t {
                        for ui in 0..u {
                            let row = &gd[(ti * u + ui) * h..(ti * u + ui + 1) * h];
                            for (o, v) in data[ui * h..(ui + 1) * h].iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    out.push((node.inputs[1], Some(mk(sb, data))));
                }
            }
        },
    }
    Ok(out)
}

/// Gradients produced by one backward sweep. Their bytes stay charged to the
/// ledger until this value is dropped or [`Gradients::detach`]ed.
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<NodeId, Tensor>,
    ledger: Ledger,
    bytes: usize,
}

impl Gradients {
    pub fn empty(ledger: Ledger) -> Self {
        Self {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            ledger,
            bytes: 0,
        }
    }

    /// Takes ownership of a tensor whose bytes are already charged.
    /// A parameter registered more than once accumulates.
    fn insert_param(&mut self, id: ParamId, g: Tensor) {
        match self.params.get_mut(&id) {
            Some(acc) => {
                let dtype = acc.dtype();
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = dtype.round(*a + v);
                }
                self.ledger.free(g.nbytes());
            }
            None => {
                self.bytes += g.nbytes();
                self.params.insert(id, g);
            }
        }
    }

    fn insert_input(&mut self, node: NodeId, g: Tensor) {
        self.bytes += g.nbytes();
        self.inputs.insert(node, g);
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn input(&self, node: NodeId) -> Option<&Tensor> {
        self.inputs.get(&node)
    }

    pub fn take_input(&mut self, node: NodeId) -> Option<Tensor> {
        let g = self.inputs.remove(&node)?;
        self.bytes -= g.nbytes();
        self.ledger.free(g.nbytes());
        Some(g)
    }

    /// Move `other`'s parameter gradients into `self`.
    pub fn absorb(&mut self, mut other: Gradients) {
        let params = std::mem::take(&mut other.params);
        for (id, g) in params {
            other.bytes -= g.nbytes();
            other.ledger.free(g.nbytes());
            self.ledger.alloc(g.nbytes());
            self.insert_param(id, g);
        }
    }

    /// Release the ledger charge and hand back plain tensors.
    pub fn detach(mut self) -> BTreeMap<ParamId, Tensor> {
        self.ledger.free(self.bytes);
        self.bytes = 0;
        self.inputs.clear();
        std::mem::take(&mut self.params)
    }
}

impl Drop for Gradients {
    fn drop(&mut self) {
        self.ledger.free(self.bytes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), DType::F64).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = tape.constant(Tensor::eye(2, DType::F64)).unwrap();
        let x = tape.constant(a.clone()).unwrap();
        assert_eq!(tape.matmul(&i, &x).unwrap().value(), a);
    }

    #[test]
    fn pointwise_values() {
        let tape = Tape::new(Ledger::new(), Mode::NoGrad);
        let z = tape.constant(Tensor::zeros(&[1, 1], DType::F64)).unwrap();
        assert_eq!(tape.sigmoid(&z).unwrap().item(), 0.5);
        let x = tape.constant(Tensor::full(&[1, 4], 0.3, DType::F64)).unwrap();
        for v in tape.log_softmax(&x).unwrap().value().data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn product_gradient_is_other_factor() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let xv = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let yv = t(&[2, 2], &[4.0, 0.25, -1.0, 2.0]);
        let (loss, xid) = {
            let x = tape.input(xv, true).unwrap();
            let y = tape.constant(yv.clone()).unwrap();
            let loss = tape.sum(&tape.mul(&x, &y).unwrap()).unwrap();
            (loss.id(), x.id())
        };
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.input(xid).unwrap(), &yv);
    }

    #[test]
    fn unreachable_trainable_param_gets_zero_gradient() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let loss = {
            let used = tape.param(ParamId(0), &t(&[1, 2], &[1.0, 2.0]), true).unwrap();
            let _unused = tape.param(ParamId(1), &t(&[2, 2], &[1.0; 4]), true).unwrap();
            tape.sum(&used).unwrap().id()
        };
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.param(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 2], DType::F64));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let loss = {
            let p = tape.param(ParamId(0), &t(&[1, 2], &[1.0, 2.0]), false).unwrap();
            let x = tape.input(t(&[1, 2], &[3.0, 4.0]), true).unwrap();
            tape.sum(&tape.mul(&p, &x).unwrap()).unwrap().id()
        };
        let g = tape.backward(loss).unwrap();
        assert!(g.param(ParamId(0)).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let id = tape.input(t(&[1, 2], &[1.0, 2.0]), true).unwrap().id();
        assert!(matches!(tape.backward(id), Err(Error::NonScalarLoss(s)) if s == vec![1, 2]));
    }

    #[test]
    fn ledger_counts_bytes_and_returns_to_zero() {
        let ledger = Ledger::new();
        let tape = Tape::new(ledger.clone(), Mode::Record);
        {
            let x = tape.input(Tensor::zeros(&[2, 3], DType::F32), true).unwrap();
            assert_eq!(ledger.current_bytes(), 24);
            let loss = tape.sum(&tape.tanh(&x).unwrap()).unwrap();
            let id = loss.id();
            drop((x, loss));
            let g = tape.backward(id).unwrap();
            assert!(ledger.peak_bytes() >= 48);
            drop(g);
        }
        assert_eq!(ledger.current_bytes(), 0);
    }

    #[test]
    fn no_grad_mode_frees_intermediates_eagerly() {
        let run = |mode| {
            let ledger = Ledger::new();
            let tape = Tape::new(ledger.clone(), mode);
            let mut x = tape.input(Tensor::zeros(&[8, 8], DType::F64), true).unwrap();
            for _ in 0..5 {
                x = tape.tanh(&x).unwrap();
            }
            let peak = ledger.peak_bytes();
            drop(x);
            (peak, tape.forward_ops())
        };
        let (record_peak, ops_a) = run(Mode::Record);
        let (nograd_peak, ops_b) = run(Mode::NoGrad);
        assert_eq!(ops_a, ops_b);
        assert_eq!(nograd_peak, 2 * 8 * 8 * 8);
        assert!(record_peak > nograd_peak);
    }

    #[test]
    fn shape_and_value_errors() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let a = tape.constant(Tensor::zeros(&[2, 3], DType::F64)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3], DType::F64)).unwrap();
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Shape { .. })));
        let c = tape.constant(Tensor::zeros(&[2, 3], DType::F32)).unwrap();
        assert!(matches!(tape.add(&a, &c), Err(Error::DType { .. })));
        let big = tape.constant(Tensor::full(&[1, 1], 1e308, DType::F64)).unwrap();
        assert!(matches!(tape.scale(&big, 10.0), Err(Error::NonFinite { .. })));
        assert!(tape.constant(Tensor::full(&[1, 1], f64::NAN, DType::F64)).is_err());
    }

    #[test]
    fn op_kind_names_round_trip() {
        let kinds = [
            OpKind::MatMul,
            OpKind::Concat { axis: 1 },
            OpKind::Slice {
                axis: 0,
                start: 2,
                len: 3,
            },
            OpKind::StackFrames { k: 3 },
            OpKind::Scale(0.5),
            OpKind::OuterAdd,
        ];
        for k in kinds {
            assert_eq!(k.to_string().parse::<OpKind>().unwrap(), k);
        }
        assert!(matches!("conv2d".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        assert!(matches!("slice:0:1".parse::<OpKind>(), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn multi_seed_rejects_duplicates() {
        let tape = Tape::new(Ledger::new(), Mode::Record);
        let id = tape.input(t(&[1, 1], &[1.0]), true).unwrap().id();
        let seed = t(&[1, 1], &[1.0]);
        assert!(tape.backward_multi(vec![(id, seed.clone()), (id, seed)]).is_err());
    }
}
