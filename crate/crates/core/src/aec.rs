//! Partially autoregressive correction decoder, run only at CHANGE positions.
//!
//! Each correction task decodes its own short span. The decoder input at
//! every step is the token-plus-position embedding of the prefix concatenated
//! with the encoder row `h_T[k]` of the task's position, projected back to
//! width `d`. The decoder attends to the whole of `H_T` as memory.

use rand::Rng;

use crate::align::{CorrectionTask, EditLabel, BOS_ID, EOS_ID, PAD_ID};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Ctx, EmbeddingTable, LinearLayer, TransformerDecoderLayer};
use crate::params::ParamStore;

/// Default cap on generated tokens per correction span.
pub const DEFAULT_MAX_SPAN: usize = 8;

#[derive(Debug, Clone)]
pub struct AecDecoder {
    pub input_proj: LinearLayer,
    pub layers: Vec<TransformerDecoderLayer>,
    pub output: LinearLayer,
}

impl AecDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        depth: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            input_proj: LinearLayer::new(store, &format!("{name}.input_proj"), 2 * d, d, rng),
            layers: (0..depth)
                .map(|i| TransformerDecoderLayer::new(store, &format!("{name}.layer{i}"), d, heads, ff, rng))
                .collect::<Result<_>>()?,
            output: LinearLayer::new(store, &format!("{name}.output"), d, vocab, rng),
        })
    }

    /// Decoder inputs `FC((TE(z) + PE(z)) || h_T[k])` for one prefix.
    pub fn correction_inputs<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        embedding: &EmbeddingTable,
        h_t: Var<'t>,
        position: usize,
        prefix: &[u32],
    ) -> Result<Var<'t>> {
        let (n, _) = h_t.dims2();
        if position >= n {
            return Err(Error::invalid(
                "correction-inputs",
                format!("task position {position} outside [0, {n})"),
            ));
        }
        let z = embedding.embed(ctx, prefix)?;
        let hk = h_t.gather_rows(&vec![position; prefix.len()])?;
        self.input_proj.apply(ctx, Var::concat(&[z, hk], 1)?)
    }

    /// Logits `[prefix.len(), vocab]` for the token following each prefix position.
    pub fn step_logits<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        embedding: &EmbeddingTable,
        h_t: Var<'t>,
        memory_valid: &[bool],
        position: usize,
        prefix: &[u32],
    ) -> Result<Var<'t>> {
        let mut x = self.correction_inputs(ctx, embedding, h_t, position, prefix)?;
        for layer in &self.layers {
            x = layer.forward(ctx, x, h_t, true, memory_valid)?;
        }
        self.output.apply(ctx, x)
    }

    /// Teacher-forced logits for every task: the prefix is the begin token
    /// followed by the targets shifted right.
    pub fn teacher_forced<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        embedding: &EmbeddingTable,
        h_t: Var<'t>,
        memory_valid: &[bool],
        tasks: &[CorrectionTask],
    ) -> Result<Vec<Var<'t>>> {
        tasks
            .iter()
            .map(|task| {
                let mut prefix = Vec::with_capacity(task.targets.len());
                prefix.push(BOS_ID);
                prefix.extend_from_slice(&task.targets[..task.targets.len() - 1]);
                self.step_logits(ctx, embedding, h_t, memory_valid, task.position, &prefix)
            })
            .collect()
    }

    /// Greedy decoding of one span until EOS or `max_len` tokens.
    pub fn greedy_span(
        &self,
        ctx: &Ctx<'_, '_>,
        embedding: &EmbeddingTable,
        h_t: Var<'_>,
        memory_valid: &[bool],
        position: usize,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.step_logits(ctx, embedding, h_t, memory_valid, position, &prefix)?;
            let (rows, vocab) = logits.dims2();
            let data = logits.data();
            let last = &data[(rows - 1) * vocab..];
            let next = (0..vocab)
                .filter(|&j| j as u32 != PAD_ID && j as u32 != BOS_ID)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if last[b] >= last[j] => Some(b),
                    _ => Some(j),
                })
                .expect("vocabulary larger than the reserved ids") as u32;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    /// Copies KEEP tokens, drops DELETE tokens and replaces each CHANGE token
    /// with a greedily decoded span.
    #[allow(clippy::too_many_arguments)]
    pub fn greedy_correct(
        &self,
        ctx: &Ctx<'_, '_>,
        embedding: &EmbeddingTable,
        tokens: &[u32],
        h_t: Var<'_>,
        memory_valid: &[bool],
        labels: &[EditLabel],
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::invalid("greedy_correct", "max_len must be at least 1"));
        }
        let mut out = Vec::with_capacity(tokens.len());
        for (k, (&tok, label)) in tokens.iter().zip(labels).enumerate() {
            match label {
                EditLabel::Keep => out.push(tok),
                EditLabel::Delete => {}
                EditLabel::Change => {
                    out.extend(self.greedy_span(ctx, embedding, h_t, memory_valid, k, max_len)?);
                }
            }
        }
        Ok(out)
    }
}

/// Mean over all `(task, step)` pairs of the target token's negative
/// log-softmax. Zero when there are no tasks.
pub fn aec_loss<'t>(tape: &'t crate::autodiff::Tape, logits: &[Var<'t>], tasks: &[&CorrectionTask]) -> Result<Var<'t>> {
    if logits.len() != tasks.len() {
        return Err(Error::invalid(
            "aec_loss",
            format!("{} logit blocks for {} tasks", logits.len(), tasks.len()),
        ));
    }
    if logits.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let targets: Vec<usize> = tasks.iter().flat_map(|t| t.targets.iter().map(|&v| v as usize)).collect();
    let stacked = if logits.len() == 1 { logits[0] } else { Var::concat(logits, 0)? };
    stacked.cross_entropy(&targets)
}
