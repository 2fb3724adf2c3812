use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{dims2, round_to_precision, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Reduction axis for `reduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse the rows: `[r, c] -> [c]`.
    Rows,
    /// Collapse the columns: `[r, c] -> [r]`.
    Cols,
    /// Collapse everything to a scalar.
    All,
}

/// One recorded primitive application. Inputs are node ids that precede the
/// node itself in the record; anything the backward rule needs beyond the
/// input and output values is saved inline.
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    LogSoftmax {
        src: NodeId,
        mask: Option<Vec<bool>>,
    },
    Log {
        src: NodeId,
        floor: f64,
    },
    Exp(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Prelu {
        src: NodeId,
        slope: NodeId,
    },
    Tanh(NodeId),
    LayerNorm {
        src: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reduce {
        src: NodeId,
        axis: Axis,
        weights: Vec<f64>,
    },
    Dropout {
        src: NodeId,
        scale: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    MaskRows {
        src: NodeId,
        mask: Vec<bool>,
    },
    Clamp {
        src: NodeId,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar-mul",
            Op::AddScalar(..) => "add-scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax-rows",
            Op::LogSoftmax { .. } => "log-softmax-rows",
            Op::Log { .. } => "log",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Reduce { .. } => "mean-over-axis",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "embedding-lookup",
            Op::CrossEntropy { .. } => "cross-entropy-from-logits",
            Op::Cosine { .. } => "cosine-similarity",
            Op::MaskRows { .. } => "mask-rows",
            Op::Clamp { .. } => "clamp",
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// The computation record. Nodes are appended in execution order, so the
/// record is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op.name(), node.shape)
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

    /// Records `t` as a leaf; gradients are kept only if `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push_raw(vec![], vec![v], Op::Leaf, false)
    }

    pub(crate) fn push_raw(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records an op output, applying the storage precision.
    pub(crate) fn push(&self, shape: Vec<usize>, mut value: Vec<f64>, op: Op) -> Var<'_> {
        round_to_precision(&mut value);
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(shape, value, op, requires_grad)
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) || loss.id >= self.len() {
            return Err(Error::NotInRecord);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 || root.shape.len() > 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        let mut local: Vec<Option<Vec<f64>>> = Vec::new();
        local.resize_with(loss.id + 1, || None);
        local[loss.id] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let buf = grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            } else {
                backprop(node, &g, &nodes, &mut local);
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.tape.nodes.borrow()[self.id].shape)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node has consistent shape")
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::Exp(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Tanh(a) => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Slice { src, .. }
        | Op::LogSoftmax { src, .. }
        | Op::Log { src, .. }
        | Op::Reduce { src, .. }
        | Op::Dropout { src, .. }
        | Op::MaskRows { src, .. }
        | Op::Clamp { src, .. } => vec![*src],
        Op::Prelu { src, slope } => vec![*src, *slope],
        Op::LayerNorm { src, gain, bias, .. } => vec![*src, *gain, *bias],
        Op::Gather { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Cosine { a, b, .. } => vec![*a, *b],
    }
}

/// Adds `f`'s contribution into the local gradient buffer of `id`, skipping
/// nodes that do not need gradients.
fn acc(local: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = local[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], local: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (r, k) = dims2(&nodes[*a].shape);
            let (_, c) = dims2(&nodes[*b].shape);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            acc(local, nodes, *a, |da| {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let bp = &bv[p * c..(p + 1) * c];
                        let mut s = 0.0;
                        for j in 0..c {
                            s += gi[j] * bp[j];
                        }
                        da[i * k + p] += s;
                    }
                }
            });
            acc(local, nodes, *b, |db| {
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut db[p * c..(p + 1) * c];
                        for j in 0..c {
                            row[j] += aip * gi[j];
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(local, nodes, *a, |da| add_into(da, g));
            acc(local, nodes, *b, |db| add_into(db, g));
        }
        Op::AddRow(a, b) => {
            acc(local, nodes, *a, |da| add_into(da, g));
            let c = nodes[*b].value.len();
            acc(local, nodes, *b, |db| {
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            });
        }
        Op::Sub(a, b) => {
            acc(local, nodes, *a, |da| add_into(da, g));
            acc(local, nodes, *b, |db| {
                for (d, v) in db.iter_mut().zip(g) {
                    *d -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            acc(local, nodes, *a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            });
            acc(local, nodes, *b, |db| {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, s) => acc(local, nodes, *a, |da| {
            for (d, v) in da.iter_mut().zip(g) {
                *d += s * v;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => acc(local, nodes, *a, |da| add_into(da, g)),
        Op::Concat { parts, axis } => {
            let (rows, cols) = dims2(&node.shape);
            let mut offset = 0;
            for &p in parts {
                let (pr, pc) = dims2(&nodes[p].shape);
                if *axis == 0 {
                    let start = offset * cols;
                    acc(local, nodes, p, |dp| add_into(dp, &g[start..start + pr * pc]));
                    offset += pr;
                } else {
                    acc(local, nodes, p, |dp| {
                        for i in 0..rows {
                            let src = &g[i * cols + offset..i * cols + offset + pc];
                            add_into(&mut dp[i * pc..(i + 1) * pc], src);
                        }
                    });
                    offset += pc;
                }
            }
        }
        Op::Slice { src, axis, start } => {
            let (_, sc) = dims2(&nodes[*src].shape);
            let (r, c) = dims2(&node.shape);
            acc(local, nodes, *src, |ds| {
                for i in 0..r {
                    for j in 0..c {
                        let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                        ds[si * sc + sj] += g[i * c + j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = dims2(&nodes[*a].shape);
            acc(local, nodes, *a, |da| {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let (_, c) = dims2(&node.shape);
            acc(local, nodes, *a, |da| {
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { src, mask } => {
            let (_, c) = dims2(&node.shape);
            acc(local, nodes, *src, |da| {
                for (row, ((yr, gr), dr)) in y.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)).enumerate() {
                    let valid = |j: usize| mask.as_ref().is_none_or(|m| m[row * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| valid(j)).map(|j| gr[j]).sum();
                    for j in 0..c {
                        if valid(j) {
                            dr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::Log { src, floor } => {
            let xv = &nodes[*src].value;
            acc(local, nodes, *src, |da| {
                for i in 0..g.len() {
                    if xv[i] > *floor {
                        da[i] += g[i] / xv[i];
                    }
                }
            });
        }
        Op::Exp(a) => acc(local, nodes, *a, |da| {
            for i in 0..g.len() {
                da[i] += g[i] * y[i];
            }
        }),
        Op::Sigmoid(a) => acc(local, nodes, *a, |da| {
            for i in 0..g.len() {
                da[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Relu(a) => {
            let xv = &nodes[*a].value;
            acc(local, nodes, *a, |da| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            });
        }
        Op::Prelu { src, slope } => {
            let xv = &nodes[*src].value;
            let a = nodes[*slope].value[0];
            acc(local, nodes, *src, |dx| {
                for i in 0..g.len() {
                    dx[i] += if xv[i] > 0.0 { g[i] } else { a * g[i] };
                }
            });
            acc(local, nodes, *slope, |ds| {
                let mut s = 0.0;
                for i in 0..g.len() {
                    if xv[i] <= 0.0 {
                        s += g[i] * xv[i];
                    }
                }
                ds[0] += s;
            });
        }
        Op::Tanh(a) => acc(local, nodes, *a, |da| {
            for i in 0..g.len() {
                da[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::LayerNorm {
            src,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (r, c) = dims2(&node.shape);
            let gv = &nodes[*gain].value;
            acc(local, nodes, *src, |dx| {
                let n = c as f64;
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[i * c + j] += inv_std[i] / n * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
            });
            acc(local, nodes, *gain, |dg| {
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            });
            acc(local, nodes, *bias, |db| {
                for row in g.chunks(c) {
                    add_into(db, row);
                }
            });
        }
        Op::Reduce { src, axis, weights } => {
            let (r, c) = dims2(&nodes[*src].shape);
            acc(local, nodes, *src, |da| match axis {
                Axis::Rows => {
                    for i in 0..r {
                        if weights[i] != 0.0 {
                            for j in 0..c {
                                da[i * c + j] += g[j] * weights[i];
                            }
                        }
                    }
                }
                Axis::Cols => {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i] * weights[j];
                        }
                    }
                }
                Axis::All => {
                    for (d, w) in da.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            });
        }
        Op::Dropout { src, scale } => acc(local, nodes, *src, |da| {
            for i in 0..g.len() {
                da[i] += g[i] * scale[i];
            }
        }),
        Op::Gather { table, ids } => {
            let (_, c) = dims2(&nodes[*table].shape);
            acc(local, nodes, *table, |dt| {
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (r, c) = dims2(&nodes[*logits].shape);
            let scale = g[0] / r as f64;
            acc(local, nodes, *logits, |dl| {
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                        dl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            });
        }
        Op::Cosine { a, b, norm_a, norm_b } => {
            let (p, d) = dims2(&nodes[*a].shape);
            let (q, _) = dims2(&nodes[*b].shape);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            acc(local, nodes, *a, |da| {
                for i in 0..p {
                    let ai = &av[i * d..(i + 1) * d];
                    for j in 0..q {
                        let gij = g[i * q + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = &bv[j * d..(j + 1) * d];
                        let cos = y[i * q + j];
                        let inv = 1.0 / (norm_a[i] * norm_b[j]);
                        let self_term = cos / (norm_a[i] * norm_a[i]);
                        for k in 0..d {
                            da[i * d + k] += gij * (bj[k] * inv - ai[k] * self_term);
                        }
                    }
                }
            });
            acc(local, nodes, *b, |db| {
                for i in 0..p {
                    let ai = &av[i * d..(i + 1) * d];
                    for j in 0..q {
                        let gij = g[i * q + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = &bv[j * d..(j + 1) * d];
                        let cos = y[i * q + j];
                        let inv = 1.0 / (norm_a[i] * norm_b[j]);
                        let self_term = cos / (norm_b[j] * norm_b[j]);
                        for k in 0..d {
                            db[j * d + k] += gij * (ai[k] * inv - bj[k] * self_term);
                        }
                    }
                }
            });
        }
        Op::MaskRows { src, mask } => {
            let (_, c) = dims2(&node.shape);
            acc(local, nodes, *src, |da| {
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        add_into(&mut da[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            });
        }
        Op::Clamp { src, lo, hi } => {
            let xv = &nodes[*src].value;
            acc(local, nodes, *src, |da| {
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        da[i] += g[i];
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
