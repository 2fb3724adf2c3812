//! Per-token ASR error detection over `H_T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::EditLabel;
use crate::autodiff::{Axis, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::layers::{Ctx, LinearLayer};
use crate::params::ParamStore;

/// How token losses are combined within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over every valid token of the batch.
    #[default]
    Mean,
    /// Sum over each utterance's tokens, averaged over utterances.
    Sum,
}

#[derive(Debug, Clone)]
pub struct AedHead {
    pub fc: LinearLayer,
}

impl AedHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc: LinearLayer::new(store, &format!("{name}.fc"), d, EditLabel::COUNT, rng),
        }
    }

    /// `[n, 3]` distributions over KEEP / DELETE / CHANGE.
    pub fn detect<'t>(&self, ctx: &Ctx<'_, 't>, h_t: Var<'t>) -> Result<Var<'t>> {
        self.fc.apply(ctx, h_t)?.softmax_rows(None)
    }
}

/// Argmax label of each of the first `len` rows.
pub fn predicted_labels(probs: &[f64], len: usize) -> Vec<EditLabel> {
    probs
        .chunks(EditLabel::COUNT)
        .take(len)
        .map(|row| {
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            EditLabel::from_index(best).expect("three classes")
        })
        .collect()
}

/// Sum of `-log max(p[target], 1e-6)` over rows where `mask` holds, and the
/// number of such rows.
pub fn nll_sum<'t>(probs: Var<'t>, targets: &[usize], mask: Option<&[bool]>) -> Result<(Var<'t>, usize)> {
    let (r, c) = probs.dims2();
    if targets.len() != r || mask.is_some_and(|m| m.len() != r) {
        return Err(Error::Shape {
            op: "nll",
            lhs: probs.shape(),
            rhs: vec![targets.len()],
        });
    }
    let mut onehot = vec![0.0; r * c];
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            if t >= c {
                return Err(Error::invalid("nll", format!("target {t} out of range for {c} classes")));
            }
            onehot[i * c + t] = 1.0;
            count += 1;
        }
    }
    let onehot = probs.tape().constant(probs.shape(), onehot)?;
    let total = probs.log_floor(LOG_FLOOR).mul(onehot)?.sum(Axis::All, None)?.neg();
    Ok((total, count))
}

/// Mean negative log-likelihood of the true labels over valid tokens.
pub fn aed_loss<'t>(probs: Var<'t>, labels: &[EditLabel], mask: &[bool]) -> Result<Var<'t>> {
    aed_loss_batch(&[(probs, labels, mask)], Reduction::Mean)
}

/// Detection loss over a batch of `(probs, labels, mask)` triples.
pub fn aed_loss_batch<'t>(items: &[(Var<'t>, &[EditLabel], &[bool])], reduction: Reduction) -> Result<Var<'t>> {
    let tape = match items.first() {
        Some((p, _, _)) => p.tape(),
        None => return Err(Error::invalid("aed_loss", "empty batch")),
    };
    let mut total = tape.scalar(0.0);
    let mut tokens = 0;
    for (probs, labels, mask) in items {
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let (s, count) = nll_sum(*probs, &targets, Some(mask))?;
        total = total.add(s)?;
        tokens += count;
    }
    let denom = match reduction {
        Reduction::Mean => tokens,
        Reduction::Sum => items.len(),
    };
    if denom == 0 {
        return Ok(total);
    }
    Ok(total.scale(1.0 / denom as f64))
}
