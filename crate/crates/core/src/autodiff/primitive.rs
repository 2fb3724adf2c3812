use std::fmt;
use std::str::FromStr;

use super::tape::{Axis, Var};
use crate::error::{Error, Result};

/// Named primitive kinds accepted by [`forward_primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Concat,
    Slice,
    Transpose,
    Reshape,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Sigmoid,
    Relu,
    Prelu,
    Tanh,
    LayerNorm,
    MeanOverAxis,
    Sum,
    Dropout,
    EmbeddingLookup,
    CrossEntropyFromLogits,
    CosineSimilarity,
    MaskRows,
    Clamp,
    Detach,
}

const NAMES: &[(&str, PrimitiveKind)] = &[
    ("matmul", PrimitiveKind::MatMul),
    ("add", PrimitiveKind::Add),
    ("sub", PrimitiveKind::Sub),
    ("mul", PrimitiveKind::Mul),
    ("scalar-mul", PrimitiveKind::ScalarMul),
    ("add-scalar", PrimitiveKind::AddScalar),
    ("concat", PrimitiveKind::Concat),
    ("slice", PrimitiveKind::Slice),
    ("transpose", PrimitiveKind::Transpose),
    ("reshape", PrimitiveKind::Reshape),
    ("softmax-rows", PrimitiveKind::SoftmaxRows),
    ("log-softmax-rows", PrimitiveKind::LogSoftmaxRows),
    ("log", PrimitiveKind::Log),
    ("exp", PrimitiveKind::Exp),
    ("sigmoid", PrimitiveKind::Sigmoid),
    ("relu", PrimitiveKind::Relu),
    ("prelu", PrimitiveKind::Prelu),
    ("tanh", PrimitiveKind::Tanh),
    ("layer-norm", PrimitiveKind::LayerNorm),
    ("mean-over-axis", PrimitiveKind::MeanOverAxis),
    ("sum", PrimitiveKind::Sum),
    ("dropout", PrimitiveKind::Dropout),
    ("embedding-lookup", PrimitiveKind::EmbeddingLookup),
    ("cross-entropy-from-logits", PrimitiveKind::CrossEntropyFromLogits),
    ("cosine-similarity", PrimitiveKind::CosineSimilarity),
    ("mask-rows", PrimitiveKind::MaskRows),
    ("clamp", PrimitiveKind::Clamp),
    ("detach", PrimitiveKind::Detach),
];

impl PrimitiveKind {
    pub fn all() -> impl Iterator<Item = PrimitiveKind> {
        NAMES.iter().map(|(_, k)| *k)
    }

    pub fn name(self) -> &'static str {
        NAMES.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap()
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, k)| *k)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Attributes for [`forward_primitive`]; each kind reads only the fields it needs.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub reduce: Option<Axis>,
    pub start: usize,
    pub len: usize,
    pub scalar: f64,
    pub lo: f64,
    pub hi: f64,
    pub mask: Option<Vec<bool>>,
    pub ids: Vec<usize>,
    pub shape: Vec<usize>,
    pub rate: f64,
    pub train: bool,
    pub seed: u64,
}

fn arity<'t>(kind: PrimitiveKind, inputs: &[Var<'t>], n: usize) -> Result<()> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(Error::Invalid {
            op: kind.name(),
            msg: format!("expected {n} inputs, got {}", inputs.len()),
        })
    }
}

/// Applies a primitive selected by kind, recording it on the inputs' tape.
pub fn forward_primitive<'t>(kind: PrimitiveKind, inputs: &[Var<'t>], attrs: &Attrs) -> Result<Var<'t>> {
    use PrimitiveKind as K;
    let n = match kind {
        K::Concat => inputs.len().max(1),
        K::MatMul | K::Add | K::Sub | K::Mul | K::Prelu | K::CosineSimilarity => 2,
        K::LayerNorm => 3,
        _ => 1,
    };
    arity(kind, inputs, n)?;
    let x = inputs[0];
    let mask = attrs.mask.as_deref();
    match kind {
        K::MatMul => x.matmul(inputs[1]),
        K::Add => x.add(inputs[1]),
        K::Sub => x.sub(inputs[1]),
        K::Mul => x.mul(inputs[1]),
        K::ScalarMul => Ok(x.scale(attrs.scalar)),
        K::AddScalar => Ok(x.add_scalar(attrs.scalar)),
        K::Concat => Var::concat(inputs, attrs.axis.unwrap_or(0)),
        K::Slice => x.slice(attrs.axis.unwrap_or(0), attrs.start, attrs.len),
        K::Transpose => x.transpose(),
        K::Reshape => x.reshape(&attrs.shape),
        K::SoftmaxRows => x.softmax_rows(mask),
        K::LogSoftmaxRows => x.log_softmax_rows(mask),
        K::Log => Ok(x.log()),
        K::Exp => Ok(x.exp()),
        K::Sigmoid => Ok(x.sigmoid()),
        K::Relu => Ok(x.relu()),
        K::Prelu => x.prelu(inputs[1]),
        K::Tanh => Ok(x.tanh()),
        K::LayerNorm => x.layer_norm(inputs[1], inputs[2]),
        K::MeanOverAxis => x.mean(attrs.reduce.unwrap_or(Axis::All), mask),
        K::Sum => x.sum(attrs.reduce.unwrap_or(Axis::All), mask),
        K::Dropout => x.dropout(attrs.rate, attrs.train, attrs.seed),
        K::EmbeddingLookup => x.gather_rows(&attrs.ids),
        K::CrossEntropyFromLogits => x.cross_entropy(&attrs.ids),
        K::CosineSimilarity => x.cosine_similarity(inputs[1]),
        K::MaskRows => x.mask_rows(mask.unwrap_or(&[])),
        K::Clamp => Ok(x.clamp(attrs.lo, attrs.hi)),
        K::Detach => Ok(x.detach()),
    }
}

/// String-keyed variant of [`forward_primitive`]; unknown kinds are rejected.
pub fn forward_primitive_named<'t>(kind: &str, inputs: &[Var<'t>], attrs: &Attrs) -> Result<Var<'t>> {
    forward_primitive(kind.parse()?, inputs, attrs)
}
