//! Synthetic paired corpora, on-disk manifests and padded batches.
//!
//! # Vocabulary layout
//!
//! Ids 0, 1 and 2 are padding, begin and end. The remaining ids are split
//! into content tokens, one confusion token per content token (what the
//! simulated recognizer substitutes for it), and filler tokens that only
//! ever appear as recognizer insertions. Content tokens are further split
//! into per-group keywords and neutral tokens.
//!
//! # Files
//!
//! A manifest has one tab-separated record per line:
//! `id  feature-path  asr-ids  gt-ids  emotion`, where id lists are
//! space-separated integers and the feature path is relative to the
//! manifest's directory. A feature file is `M4FT`, a `u32` version, `u32`
//! rows, `u32` cols, then row-major little-endian `f32` values. The vocab
//! sidecar holds one token string per line; the line number is the id.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{corpus_wer, edit_script, EditScript, RESERVED_IDS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"M4FT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[frames, feat_dim]`.
    pub speech: Tensor,
    pub asr_tokens: Vec<u32>,
    pub gt_tokens: Vec<u32>,
    pub emotion: usize,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.speech.dims2().0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub vocab: usize,
    pub feat_dim: usize,
    /// Inclusive range of raw speech frames.
    pub speech_len: (usize, usize),
    /// Inclusive range of reference transcript tokens.
    pub text_len: (usize, usize),
    pub target_wer: f64,
    /// Amplitude of the class prototype in the speech features.
    pub speech_cue: f64,
    /// Probability that a transcript token is a class keyword.
    pub text_cue: f64,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Speech identifies `class / 2` and text identifies `class % 2`, so
    /// only both modalities together determine the class.
    pub split_cues: bool,
    /// Fixes prototypes and keyword groups.
    pub seed: u64,
    /// Selects an independent sample stream under the same class structure.
    pub stream: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::validation("emotions", "need at least two classes"));
        }
        if self.split_cues && self.classes != 4 {
            return Err(Error::validation("split_cues", "requires exactly four classes"));
        }
        if !(0.0..1.0).contains(&self.target_wer) {
            return Err(Error::validation("target_wer", "must lie in [0, 1)"));
        }
        if self.speech_len.0 == 0 || self.speech_len.0 > self.speech_len.1 {
            return Err(Error::validation("speech_len_min", "invalid speech length range"));
        }
        if self.text_len.0 == 0 || self.text_len.0 > self.text_len.1 {
            return Err(Error::validation("text_len_min", "invalid text length range"));
        }
        if !(0.0..=1.0).contains(&self.text_cue) {
            return Err(Error::validation("text_cue", "must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.speech_cue >= 0.0) {
            return Err(Error::validation("noise", "noise and speech_cue must be non-negative"));
        }
        VocabLayout::new(self.vocab, self.text_groups())?;
        Ok(())
    }

    pub fn speech_groups(&self) -> usize {
        if self.split_cues {
            2
        } else {
            self.classes
        }
    }

    pub fn text_groups(&self) -> usize {
        if self.split_cues {
            2
        } else {
            self.classes
        }
    }

    pub fn speech_group(&self, class: usize) -> usize {
        if self.split_cues {
            class / 2
        } else {
            class
        }
    }

    pub fn text_group(&self, class: usize) -> usize {
        if self.split_cues {
            class % 2
        } else {
            class
        }
    }
}

/// Partition of the id space described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabLayout {
    pub vocab: usize,
    pub content: usize,
    pub keywords_per_group: usize,
    pub groups: usize,
    pub filler: usize,
}

impl VocabLayout {
    pub fn new(vocab: usize, groups: usize) -> Result<Self> {
        let free = vocab.saturating_sub(RESERVED_IDS as usize);
        let filler = (free / 8).max(1);
        let content = free.saturating_sub(filler) / 2;
        let keywords_per_group = content / (2 * groups.max(1));
        if keywords_per_group == 0 || content <= keywords_per_group * groups {
            return Err(Error::validation(
                "d_vocab",
                format!("vocabulary of {vocab} too small for {groups} keyword groups"),
            ));
        }
        Ok(Self {
            vocab,
            content,
            keywords_per_group,
            groups,
            filler,
        })
    }

    fn content_id(&self, i: usize) -> u32 {
        RESERVED_IDS + i as u32
    }

    pub fn keyword(&self, group: usize, i: usize) -> u32 {
        self.content_id(group * self.keywords_per_group + i)
    }

    pub fn neutral_count(&self) -> usize {
        self.content - self.keywords_per_group * self.groups
    }

    pub fn neutral(&self, i: usize) -> u32 {
        self.content_id(self.keywords_per_group * self.groups + i)
    }

    pub fn confusion(&self, token: u32) -> u32 {
        token + self.content as u32
    }

    pub fn filler_id(&self, i: usize) -> u32 {
        RESERVED_IDS + 2 * self.content as u32 + i as u32
    }

    /// One display string per id.
    pub fn token_strings(&self) -> Vec<String> {
        let mut out: Vec<String> = ["<pad>", "<s>", "</s>"].iter().map(|s| s.to_string()).collect();
        for i in 0..self.content {
            let g = i / self.keywords_per_group;
            out.push(if g < self.groups {
                format!("kw{g}_{}", i % self.keywords_per_group)
            } else {
                format!("w{}", i - self.keywords_per_group * self.groups)
            });
        }
        for i in 0..self.content {
            out.push(format!("{}~", out[RESERVED_IDS as usize + i]));
        }
        let used = out.len();
        for i in 0..self.vocab - used {
            out.push(if i < self.filler {
                format!("uh{i}")
            } else {
                format!("<unused{i}>")
            });
        }
        out
    }
}

struct Prototype {
    mean: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

struct Draft {
    emotion: usize,
    speech: Vec<f64>,
    frames: usize,
    gt: Vec<u32>,
    event: Vec<f64>,
    insert: Vec<f64>,
    filler: Vec<u32>,
}

/// Substitution, deletion and insertion shares of the corruption rate.
const SUBSTITUTE: f64 = 0.6;
const DELETE: f64 = 0.15;
const INSERT: f64 = 0.25;

fn corrupt(layout: &VocabLayout, d: &Draft, rate: f64) -> Vec<u32> {
    let mut out = Vec::with_capacity(d.gt.len() + 2);
    for (i, &tok) in d.gt.iter().enumerate() {
        let u = d.event[i];
        if u < SUBSTITUTE * rate {
            out.push(layout.confusion(tok));
        } else if u >= (SUBSTITUTE + DELETE) * rate {
            out.push(tok);
        }
        if d.insert[i] < INSERT * rate {
            out.push(d.filler[i]);
        }
    }
    if out.is_empty() {
        out.push(d.gt[0]);
    }
    out
}

/// Generates `count` utterances. Class structure (speech prototypes and
/// keyword groups) depends on `cfg.seed` only; samples depend on both
/// `seed` and `stream`. The corruption rate is searched so that the corpus
/// word error rate lands as close as possible to `target_wer`.
pub fn generate_synthetic(cfg: &SynthConfig, count: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::validation("count", "must be at least 1"));
    }
    let layout = VocabLayout::new(cfg.vocab, cfg.text_groups())?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Prototype> = (0..cfg.speech_groups())
        .map(|_| Prototype {
            mean: (0..cfg.feat_dim).map(|_| proto_rng.gen_range(-1.0..1.0)).collect(),
            freq: (0..cfg.feat_dim).map(|_| proto_rng.gen_range(0.3..1.0)).collect(),
            phase: (0..cfg.feat_dim).map(|_| proto_rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stream + 1);
    let noise_amp = cfg.noise * 3f64.sqrt();
    let drafts: Vec<Draft> = (0..count)
        .map(|_| {
            let emotion = rng.gen_range(0..cfg.classes);
            let proto = &prototypes[cfg.speech_group(emotion)];
            let frames = rng.gen_range(cfg.speech_len.0..=cfg.speech_len.1);
            let offset = rng.gen_range(0.0..8.0);
            let mut speech = Vec::with_capacity(frames * cfg.feat_dim);
            for t in 0..frames {
                for f in 0..cfg.feat_dim {
                    let clean = proto.mean[f] + 0.5 * (proto.freq[f] * (t as f64 + offset) + proto.phase[f]).sin();
                    let v = cfg.speech_cue * clean + noise_amp * rng.gen_range(-1.0..1.0);
                    speech.push(v as f32 as f64);
                }
            }
            let n = rng.gen_range(cfg.text_len.0..=cfg.text_len.1);
            let group = cfg.text_group(emotion);
            let gt: Vec<u32> = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < cfg.text_cue {
                        layout.keyword(group, rng.gen_range(0..layout.keywords_per_group))
                    } else {
                        layout.neutral(rng.gen_range(0..layout.neutral_count()))
                    }
                })
                .collect();
            let event = (0..n).map(|_| rng.gen()).collect();
            let insert = (0..n).map(|_| rng.gen()).collect();
            let filler = (0..n).map(|_| layout.filler_id(rng.gen_range(0..layout.filler))).collect();
            Draft {
                emotion,
                speech,
                frames,
                gt,
                event,
                insert,
                filler,
            }
        })
        .collect();

    let wer_at = |rate: f64| -> Result<f64> {
        let asr: Vec<Vec<u32>> = drafts.iter().map(|d| corrupt(&layout, d, rate)).collect();
        corpus_wer(asr.iter().zip(&drafts).map(|(a, d)| (a.as_slice(), d.gt.as_slice())))
    };
    let rate = if cfg.target_wer == 0.0 {
        0.0
    } else {
        let (mut lo, mut hi) = (0.0, 1.0 / (SUBSTITUTE + DELETE));
        let (mut best, mut best_err) = (hi, f64::INFINITY);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let w = wer_at(mid)?;
            if (w - cfg.target_wer).abs() < best_err {
                best = mid;
                best_err = (w - cfg.target_wer).abs();
            }
            if w < cfg.target_wer {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best
    };

    let width = count.to_string().len();
    Ok(drafts
        .iter()
        .enumerate()
        .map(|(i, d)| Utterance {
            id: format!("utt{:0width$}", i, width = width),
            speech: Tensor::new(vec![d.frames, cfg.feat_dim], d.speech.clone()).expect("consistent shape"),
            asr_tokens: corrupt(&layout, d, rate),
            gt_tokens: d.gt.clone(),
            emotion: d.emotion,
        })
        .collect())
}

pub fn write_features(path: &Path, speech: &Tensor) -> Result<()> {
    let (rows, cols) = speech.dims2();
    let mut bytes = Vec::with_capacity(16 + 4 * rows * cols);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in speech.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if word(4) != FEATURE_VERSION {
        return Err(fail(4, &format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = 16 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            &format!("header declares {rows}x{cols} values but file has {} bytes", bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

fn format_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes `<dir>/<name>.tsv` and one feature file per utterance under
/// `<dir>/features/`. Returns the manifest path.
pub fn write_manifest(dir: &Path, name: &str, utterances: &[Utterance]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let manifest = dir.join(format!("{name}.tsv"));
    let mut text = String::new();
    for u in utterances {
        let rel = format!("features/{}.m4ft", u.id);
        write_features(&dir.join(&rel), &u.speech)?;
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            u.id,
            rel,
            format_ids(&u.asr_tokens),
            format_ids(&u.gt_tokens),
            u.emotion
        ));
    }
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn write_vocab(path: &Path, tokens: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in tokens {
        writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Limits a manifest record must satisfy.
#[derive(Debug, Clone, Copy)]
pub struct ManifestLimits {
    pub emotions: usize,
    pub vocab: usize,
    pub feat_dim: usize,
}

pub fn load_manifest(path: &Path, limits: ManifestLimits) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let ids = |field: &str, s: &str| -> Result<Vec<u32>> {
            s.split_whitespace()
                .map(|t| {
                    let id: u32 = t.parse().map_err(|_| bad(format!("{field}: `{t}` is not a token id")))?;
                    if id as usize >= limits.vocab {
                        return Err(bad(format!("{field}: token id {id} outside vocabulary of {}", limits.vocab)));
                    }
                    Ok(id)
                })
                .collect()
        };
        let asr_tokens = ids("asr_tokens", fields[2])?;
        let gt_tokens = ids("gt_tokens", fields[3])?;
        if gt_tokens.is_empty() {
            return Err(bad("gt_tokens: must not be empty".into()));
        }
        if asr_tokens.is_empty() {
            return Err(bad("asr_tokens: must not be empty".into()));
        }
        let emotion: usize = fields[4]
            .trim()
            .parse()
            .map_err(|_| bad(format!("emotion: `{}` is not a class index", fields[4])))?;
        if emotion >= limits.emotions {
            return Err(bad(format!("emotion: {emotion} must be below {}", limits.emotions)));
        }
        let feat_path = base.join(fields[1]);
        if !feat_path.exists() {
            return Err(bad(format!("feature file {} not found", feat_path.display())));
        }
        let speech = read_features(&feat_path)?;
        let (rows, cols) = speech.dims2();
        if cols != limits.feat_dim || rows == 0 {
            return Err(bad(format!(
                "feature file {} has shape {rows}x{cols}, expected feature dim {}",
                feat_path.display(),
                limits.feat_dim
            )));
        }
        if !speech.is_finite() {
            return Err(bad(format!("feature file {} contains non-finite values", feat_path.display())));
        }
        out.push(Utterance {
            id: fields[0].to_string(),
            speech,
            asr_tokens,
            gt_tokens,
            emotion,
        });
    }
    Ok(out)
}

/// Utterances with their edit scripts, computed once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub scripts: Vec<EditScript>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        let scripts = utterances.iter().map(|u| edit_script(&u.asr_tokens, &u.gt_tokens)).collect();
        Self { utterances, scripts }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.emotion).collect()
    }
}

/// One padded mini-batch. Speech blocks are padded with zero rows to the
/// longest utterance and token lists with [`crate::align::PAD_ID`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub speech: Vec<Tensor>,
    pub speech_lens: Vec<usize>,
    pub frame_mask: Vec<Vec<bool>>,
    pub asr_tokens: Vec<Vec<u32>>,
    pub asr_lens: Vec<usize>,
    pub token_mask: Vec<Vec<bool>>,
    pub gt_tokens: Vec<Vec<u32>>,
    pub gt_lens: Vec<usize>,
    pub emotions: Vec<usize>,
    pub scripts: Vec<EditScript>,
    /// `positives[i]`: other batch members sharing item `i`'s label.
    pub positives: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        let utts: Vec<&Utterance> = indices.iter().map(|&i| &dataset.utterances[i]).collect();
        let feat = utts.first().map_or(0, |u| u.speech.dims2().1);
        let max_frames = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let max_asr = utts.iter().map(|u| u.asr_tokens.len()).max().unwrap_or(0);
        let max_gt = utts.iter().map(|u| u.gt_tokens.len()).max().unwrap_or(0);
        let pad = |ids: &[u32], to: usize| {
            let mut v = ids.to_vec();
            v.resize(to, crate::align::PAD_ID);
            v
        };
        let mask = |len: usize, to: usize| (0..to).map(|i| i < len).collect::<Vec<bool>>();
        let emotions: Vec<usize> = utts.iter().map(|u| u.emotion).collect();
        Self {
            indices: indices.to_vec(),
            speech: utts
                .iter()
                .map(|u| {
                    let mut data = u.speech.data().to_vec();
                    data.resize(max_frames * feat, 0.0);
                    Tensor::new(vec![max_frames, feat], data).expect("consistent shape")
                })
                .collect(),
            speech_lens: utts.iter().map(|u| u.frames()).collect(),
            frame_mask: utts.iter().map(|u| mask(u.frames(), max_frames)).collect(),
            asr_tokens: utts.iter().map(|u| pad(&u.asr_tokens, max_asr)).collect(),
            asr_lens: utts.iter().map(|u| u.asr_tokens.len()).collect(),
            token_mask: utts.iter().map(|u| mask(u.asr_tokens.len(), max_asr)).collect(),
            gt_tokens: utts.iter().map(|u| pad(&u.gt_tokens, max_gt)).collect(),
            gt_lens: utts.iter().map(|u| u.gt_tokens.len()).collect(),
            positives: (0..emotions.len())
                .map(|i| (0..emotions.len()).filter(|&j| j != i && emotions[j] == emotions[i]).collect())
                .collect(),
            emotions,
            scripts: indices.iter().map(|&i| dataset.scripts[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits the dataset into batches, shuffled with `seed` when requested.
/// The final short batch is kept unless it has a single item and
/// `require_pairs` is set.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool, require_pairs: bool) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::validation("batch_size", "must be at least 2"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 && require_pairs {
            log::info!("dropping final batch of {} item(s): contrastive loss needs pairs", chunk.len());
            continue;
        }
        batches.push(Batch::from_indices(dataset, chunk));
    }
    Ok(batches)
}

/// Class histogram.
pub fn class_counts(utterances: &[Utterance], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for u in utterances {
        counts[u.emotion] += 1;
    }
    counts
}

/// Maps token strings to ids for a vocabulary file.
pub fn vocab_index(tokens: &[String]) -> HashMap<&str, u32> {
    tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as u32)).collect()
}
