//! Alignment of an ASR hypothesis against its reference transcript.
//!
//! The longest common subsequence fixes which hypothesis tokens are kept.
//! Every gap between consecutive anchors is then resolved locally:
//!
//! * hypothesis gap and reference gap both non-empty: the first hypothesis
//!   token becomes CHANGE with the whole reference gap as its target, the
//!   rest become DELETE;
//! * reference gap empty: every hypothesis token in the gap is DELETE;
//! * hypothesis gap empty (pure insertion): the anchor to the left absorbs
//!   the inserted tokens by becoming CHANGE with target `own token + gap`.
//!   An insertion before the first anchor is absorbed by that anchor as
//!   `gap + own token`.
//!
//! Every target ends with [`EOS_ID`]. Applying the script (keep, drop, or
//! expand each token) reproduces the reference exactly whenever the
//! hypothesis is non-empty.

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED_IDS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditLabel {
    Keep = 0,
    Delete = 1,
    Change = 2,
}

impl EditLabel {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Keep),
            1 => Some(Self::Delete),
            2 => Some(Self::Change),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionTask {
    /// Index of the CHANGE token in the hypothesis.
    pub position: usize,
    /// Replacement span followed by [`EOS_ID`].
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EditScript {
    pub labels: Vec<EditLabel>,
    pub tasks: Vec<CorrectionTask>,
}

impl EditScript {
    /// Keeps KEEP tokens, drops DELETE tokens and expands CHANGE tokens.
    pub fn apply(&self, asr: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(asr.len());
        let mut tasks = self.tasks.iter();
        for (tok, label) in asr.iter().zip(&self.labels) {
            match label {
                EditLabel::Keep => out.push(*tok),
                EditLabel::Delete => {}
                EditLabel::Change => {
                    let task = tasks.next().expect("one task per CHANGE label");
                    out.extend(task.targets.iter().filter(|&&t| t != EOS_ID));
                }
            }
        }
        out
    }
}

/// LCS anchor pairs `(asr index, gt index)` in increasing order. The
/// backtrace takes the diagonal on a match, otherwise moves up when that
/// keeps the optimum and left only when it must.
pub fn lcs_align(asr: &[u32], gt: &[u32]) -> Vec<(usize, usize)> {
    let (n, g) = (asr.len(), gt.len());
    let w = g + 1;
    let mut table = vec![0u32; (n + 1) * w];
    for i in 1..=n {
        for j in 1..=g {
            table[i * w + j] = if asr[i - 1] == gt[j - 1] {
                table[(i - 1) * w + j - 1] + 1
            } else {
                table[(i - 1) * w + j].max(table[i * w + j - 1])
            };
        }
    }
    let mut anchors = Vec::with_capacity(table[n * w + g] as usize);
    let (mut i, mut j) = (n, g);
    while i > 0 && j > 0 {
        if asr[i - 1] == gt[j - 1] {
            anchors.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if table[(i - 1) * w + j] >= table[i * w + j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    anchors.reverse();
    anchors
}

/// Builds the label sequence and correction tasks from LCS anchors.
pub fn derive_edit_script(asr: &[u32], gt: &[u32], anchors: &[(usize, usize)]) -> EditScript {
    let n = asr.len();
    let mut labels = vec![EditLabel::Delete; n];
    let mut prefix: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut suffix: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut change_span: Vec<Option<Vec<u32>>> = vec![None; n];

    for &(i, _) in anchors {
        labels[i] = EditLabel::Keep;
    }
    // gap k lies between anchor k-1 and anchor k; the last gap is open-ended
    let mut prev: Option<(usize, usize)> = None;
    for k in 0..=anchors.len() {
        let (a_lo, g_lo) = prev.map_or((0, 0), |(i, j)| (i + 1, j + 1));
        let (a_hi, g_hi) = anchors.get(k).copied().unwrap_or((n, gt.len()));
        let gt_gap = &gt[g_lo..g_hi];
        if a_lo < a_hi {
            if !gt_gap.is_empty() {
                change_span[a_lo] = Some(gt_gap.to_vec());
            }
        } else if !gt_gap.is_empty() {
            match prev {
                Some((i, _)) => suffix[i].extend_from_slice(gt_gap),
                None => {
                    if let Some(&(i, _)) = anchors.first() {
                        prefix[i].extend_from_slice(gt_gap);
                    }
                }
            }
        }
        prev = anchors.get(k).copied();
    }

    let mut tasks = Vec::new();
    for i in 0..n {
        let targets = if let Some(span) = change_span[i].take() {
            Some(span)
        } else if labels[i] == EditLabel::Keep && (!prefix[i].is_empty() || !suffix[i].is_empty()) {
            let mut t = std::mem::take(&mut prefix[i]);
            t.push(asr[i]);
            t.append(&mut suffix[i]);
            Some(t)
        } else {
            None
        };
        if let Some(mut targets) = targets {
            labels[i] = EditLabel::Change;
            targets.push(EOS_ID);
            tasks.push(CorrectionTask { position: i, targets });
        }
    }
    EditScript { labels, tasks }
}

/// `derive_edit_script(asr, gt, lcs_align(asr, gt))`.
pub fn edit_script(asr: &[u32], gt: &[u32]) -> EditScript {
    derive_edit_script(asr, gt, &lcs_align(asr, gt))
}

/// Levenshtein distance with unit substitution, deletion and insertion costs.
pub fn edit_distance(hyp: &[u32], reference: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

pub fn word_error_rate(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("word_error_rate", "empty reference"));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level rate: total edits over total reference length.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Result<f64> {
    let (mut edits, mut total) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        edits += edit_distance(hyp, reference);
        total += reference.len();
    }
    if total == 0 {
        return Err(Error::invalid("word_error_rate", "empty reference corpus"));
    }
    Ok(edits as f64 / total as f64)
}
