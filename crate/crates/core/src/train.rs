//! Joint training with the two-step adversarial update, Adam, and
//! checkpoints.
//!
//! Each step runs one forward pass, then
//! 1. updates the discriminator by ascending `l_gan` computed on detached
//!    copies of the fused representations, and
//! 2. updates every other parameter by descending
//!    `l_er + alpha * (beta * l_aed + l_aec) + gamma * l_g + lambda * l_lcl`,
//!    where `l_g` is recomputed through the updated, frozen discriminator.
//!
//! Speech-only and text-only models train the emotion loss alone.
//!
//! # Checkpoint layout
//!
//! Little-endian throughout: magic `M4SR`, `u32` version, `u64` epoch,
//! `u32` length plus UTF-8 config text, `u32` record count followed by
//! parameter records (`u32` name length, name, `u8` dtype code, `u32` rank,
//! `u32` dims, `f64` data), then the two optimizer states (`u64` step,
//! `u32` count, then per parameter `u32` name length, name, `u32` length,
//! first moments, second moments), then the RNG state (32-byte seed,
//! `u64` stream, `u128` word position).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_param_gradients, precision, with_precision, Precision, Probe, ProbeReport, Tape, Var};
use crate::config::{Config, SelectionMetric};
use crate::data::{generate_synthetic, make_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::heads::ModalityDiscriminator;
use crate::layers::Ctx;
use crate::model::{ForwardOptions, ItemForward, Modality, Model};
use crate::objectives::{total_loss, LossBundle, LossParts};
use crate::params::{ParamStore, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M4SR";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Store indices of the parameters this instance updates.
    pub params: Vec<usize>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<usize>, lr: f64) -> Self {
        let zeros = |&i: &usize| vec![0.0; store.tensor_by_index(i).numel()];
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
        }
    }

    /// Applies one update from `grads` (one entry per managed parameter,
    /// `None` meaning zero), after rescaling them to a global norm of at
    /// most `clip`. Returns the norm before clipping.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], clip: f64) -> f64 {
        debug_assert_eq!(grads.len(), self.params.len());
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let round = precision() == Precision::F32;
        for (k, &idx) in self.params.iter().enumerate() {
            let data = store.tensor_by_index_mut(idx).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..data.len() {
                let g = grads[k].as_ref().map_or(0.0, |g| g[i] * scale);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= upd;
                if round {
                    data[i] = data[i] as f32 as f64;
                }
            }
        }
        norm
    }
}

/// Losses of one step and the mean discriminator score on the invariant
/// representation (fused models only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    pub inv_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidMetrics {
    pub wa: f64,
    pub ua: f64,
    pub wf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub losses: LossBundle,
    pub inv_score: Option<f64>,
    pub valid: Option<ValidMetrics>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters are in `best`; 0 for the initial model.
    pub best_epoch: u64,
    pub best: ParamStore,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub main_opt: Adam,
    pub disc_opt: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u64,
    /// Verify after every step that each update touched only its own
    /// parameter group and that detached inputs received no gradient.
    pub audit: bool,
}

fn not_finite(term: &'static str, batch: usize) -> Error {
    Error::NonFiniteLoss { term, batch: Some(batch) }
}

fn check(term: &'static str, v: f64, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(not_finite(term, batch))
    }
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model(), cfg.seed)?;
        Ok(Self::with_model(cfg, model))
    }

    /// Wraps an existing model with fresh optimizer and RNG state.
    pub fn with_model(cfg: Config, model: Model) -> Self {
        let store = &model.store;
        let (disc, main): (Vec<usize>, Vec<usize>) =
            (0..store.len()).partition(|&i| ModalityDiscriminator::is_param(store.name_by_index(i)));
        let main_opt = Adam::new(store, main, cfg.learning_rate);
        let disc_opt = Adam::new(store, disc, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x0074_7261_696e);
        Self {
            cfg,
            model,
            main_opt,
            disc_opt,
            rng,
            epoch: 0,
            audit: false,
        }
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            tau: self.cfg.tau,
            aed_reduction: self.cfg.aed_reduction,
            lcl_include_self: self.cfg.lcl_include_self,
            auxiliary: true,
        }
    }

    fn adversarial(&self) -> bool {
        self.model.cfg.modality == Modality::Both
    }

    fn grads_of(params: &Params<'_>, indices: &[usize]) -> Vec<Option<Vec<f64>>> {
        indices.iter().map(|&i| params.get_by_index(i).grad()).collect()
    }

    fn disc_hash(&self) -> u64 {
        self.model.store.hash_where(ModalityDiscriminator::is_param)
    }

    fn main_hash(&self) -> u64 {
        self.model.store.hash_where(|n| !ModalityDiscriminator::is_param(n))
    }

    /// Ascends `l_gan` on the discriminator, whose inputs are detached
    /// copies of the items' representations. Returns `(l_d, l_g, l_gan)`
    /// before the update.
    pub fn discriminator_update<'t>(
        &mut self,
        tape: &'t Tape,
        params: &Params<'t>,
        items: &[ItemForward<'t>],
        batch_id: usize,
    ) -> Result<(f64, f64, f64)> {
        let ctx = Ctx::eval(tape, params);
        let (gan, _) = self.model.gan_terms(&ctx, items, true)?;
        let values = (
            check("l_d", gan.l_d.item(), batch_id)?,
            check("l_g", gan.l_g.item(), batch_id)?,
            check("l_gan", gan.l_gan.item(), batch_id)?,
        );
        tape.zero_grad();
        tape.backward(gan.l_gan)?;
        if self.audit {
            for &i in &self.main_opt.params {
                if params.get_by_index(i).grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                    return Err(Error::invalid(
                        "train_step",
                        format!("detached adversarial loss reached `{}`", self.model.store.name_by_index(i)),
                    ));
                }
            }
        }
        let ascent: Vec<Option<Vec<f64>>> = Self::grads_of(params, &self.disc_opt.params)
            .into_iter()
            .map(|g| g.map(|g| g.into_iter().map(|x| -x).collect()))
            .collect();
        let clip = self.cfg.grad_clip;
        self.disc_opt.update(&mut self.model.store, &ascent, clip);
        tape.zero_grad();
        Ok(values)
    }

    pub fn train_step(&mut self, batch: &Batch, batch_id: usize) -> Result<StepReport> {
        with_precision(self.cfg.precision, || self.train_step_inner(batch, batch_id))
    }

    fn train_step_inner(&mut self, batch: &Batch, batch_id: usize) -> Result<StepReport> {
        let w = self.cfg.loss_weights();
        let seed: u64 = self.rng.gen();
        let tape = Tape::new();
        let params = self.model.store.bind(&tape, |_| true);
        let ctx = Ctx::new(&tape, &params, true, self.cfg.dropout, seed);
        let out = self.model.forward_batch(&ctx, batch, self.forward_options())?;

        let l_er = check("l_er", out.l_er.item(), batch_id)?;
        let value = |v: Option<Var<'_>>, term| v.map_or(Ok(0.0), |v| check(term, v.item(), batch_id));
        let l_aed = value(out.l_aed, "l_aed")?;
        let l_aec = value(out.l_aec, "l_aec")?;
        let l_lcl = value(out.l_lcl, "l_lcl")?;

        let main_before = self.main_hash();
        let (mut l_d, mut l_g, mut l_gan, mut inv_score) = (0.0, 0.0, 0.0, None);
        let objective = if self.adversarial() {
            (l_d, l_g, l_gan) = self.discriminator_update(&tape, &params, &out.items, batch_id)?;
            if self.audit && self.main_hash() != main_before {
                return Err(Error::invalid("train_step", "discriminator update changed other parameters"));
            }
            let frozen = self.model.store.bind(&tape, |_| false);
            let frozen_ctx = Ctx::eval(&tape, &frozen);
            let (gan, scores) = self.model.gan_terms(&frozen_ctx, &out.items, false)?;
            check("l_g", gan.l_g.item(), batch_id)?;
            let (mut sum, mut frames) = (0.0, 0usize);
            for (s, it) in scores.iter().zip(&out.items) {
                for (v, &ok) in s.inv.data().iter().zip(&it.frame_mask) {
                    if ok {
                        sum += v;
                        frames += 1;
                    }
                }
            }
            inv_score = Some(sum / frames.max(1) as f64);

            let mut obj = out.l_er;
            if let (Some(aed), Some(aec)) = (out.l_aed, out.l_aec) {
                obj = obj.add(aed.scale(w.alpha * w.beta))?.add(aec.scale(w.alpha))?;
            }
            obj = obj.add(gan.l_g.scale(w.gamma))?;
            if let Some(lcl) = out.l_lcl {
                obj = obj.add(lcl.scale(w.lambda))?;
            }
            obj
        } else {
            out.l_er
        };
        let total = total_loss(
            LossParts {
                er: l_er,
                aed: l_aed,
                aec: l_aec,
                gan: l_gan,
                lcl: l_lcl,
            },
            &w,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => not_finite(term, batch_id),
            other => other,
        })?;

        let disc_before = self.disc_hash();
        tape.backward(objective)?;
        let grads = Self::grads_of(&params, &self.main_opt.params);
        let clip = self.cfg.grad_clip;
        self.main_opt.update(&mut self.model.store, &grads, clip);
        if self.audit && self.disc_hash() != disc_before {
            return Err(Error::invalid("train_step", "main update changed discriminator parameters"));
        }
        Ok(StepReport {
            losses: LossBundle {
                l_er,
                l_aed,
                l_aec,
                l_d,
                l_g,
                l_gan,
                l_lcl,
                total,
            },
            inv_score,
        })
    }

    fn shuffle_seed(&self, epoch: u64) -> u64 {
        self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
    }

    /// One pass over `train`; returns the epoch's running-mean losses.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<(LossBundle, Option<f64>)> {
        let require_pairs = self.adversarial() && self.cfg.lambda > 0.0;
        let batches = make_batches(train, self.cfg.batch_size, self.shuffle_seed(self.epoch), true, require_pairs)?;
        let mut mean = LossBundle::default();
        let (mut inv, mut inv_n) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let report = self.train_step(batch, b)?;
            mean.accumulate(&report.losses, b);
            if let Some(s) = report.inv_score {
                inv += s;
                inv_n += 1;
            }
        }
        self.epoch += 1;
        Ok((mean, (inv_n > 0).then(|| inv / inv_n as f64)))
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `observe`
    /// after each one. With a validation set the parameters of the best
    /// epoch under `selection_metric` are kept, ties going to the later
    /// epoch; otherwise the last epoch's.
    pub fn fit(&mut self, train: &Dataset, valid: Option<&Dataset>, mut observe: impl FnMut(&EpochRecord)) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::validation("train", "dataset is empty"));
        }
        let mut history = Vec::new();
        let mut best = self.model.store.clone();
        let mut best_epoch = self.epoch;
        let mut best_score = f64::NEG_INFINITY;
        while self.epoch < self.cfg.epochs as u64 {
            let (losses, inv_score) = self.run_epoch(train)?;
            let valid_metrics = match valid {
                Some(v) if !v.is_empty() => {
                    let r = with_precision(self.cfg.precision, || evaluate(&self.model, v))?;
                    Some(ValidMetrics {
                        wa: r.wa,
                        ua: r.ua,
                        wf1: r.wf1,
                    })
                }
                _ => None,
            };
            let score = valid_metrics.map_or(f64::INFINITY, |m| match self.cfg.selection_metric {
                SelectionMetric::Wa => m.wa,
                SelectionMetric::Wf1 => m.wf1,
            });
            if score >= best_score {
                best_score = score;
                best = self.model.store.clone();
                best_epoch = self.epoch;
            }
            let record = EpochRecord {
                epoch: self.epoch,
                losses,
                inv_score,
                valid: valid_metrics,
            };
            log::info!(
                "epoch {} total {:.4} er {:.4} g {:.4} lcl {:.4}{}",
                record.epoch,
                losses.total,
                losses.l_er,
                losses.l_g,
                losses.l_lcl,
                valid_metrics.map_or(String::new(), |m| format!(" valid wa {:.3}", m.wa))
            );
            observe(&record);
            history.push(record);
        }
        Ok(FitSummary { history, best_epoch, best })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_bytes(&mut out, self.cfg.to_toml_string().as_bytes());
        let store = &self.model.store;
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (_, name, t) in store.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for opt in [&self.main_opt, &self.disc_opt] {
            out.extend_from_slice(&opt.step.to_le_bytes());
            out.extend_from_slice(&(opt.params.len() as u32).to_le_bytes());
            for (k, &i) in opt.params.iter().enumerate() {
                put_bytes(&mut out, store.name_by_index(i).as_bytes());
                out.extend_from_slice(&(opt.m[k].len() as u32).to_le_bytes());
                for v in opt.m[k].iter().chain(&opt.v[k]) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses a whole checkpoint before building any state.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(4, &format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()?;
        let cfg_at = r.pos;
        let cfg_text = std::str::from_utf8(r.bytes_field()?).map_err(|_| r.fail(cfg_at, "config is not UTF-8"))?;
        let cfg = Config::from_toml_str(cfg_text).map_err(|e| r.fail(cfg_at, &e.to_string()))?;
        let mut model = Model::new(cfg.model(), cfg.seed).map_err(|e| r.fail(cfg_at, &e.to_string()))?;

        let count_at = r.pos;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(r.fail(count_at, &format!("{count} parameters, model has {}", model.store.len())));
        }
        for _ in 0..count {
            let at = r.pos;
            let name = r.string()?;
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| r.fail(at, &format!("unknown parameter `{name}`")))?;
            let dtype_at = r.pos;
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(r.fail(dtype_at, "unsupported dtype"));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != model.store.get(id).shape() {
                return Err(r.fail(at, &format!("shape {dims:?} of `{name}` does not match the model")));
            }
            let n: usize = dims.iter().product();
            let values = r.f64s(n)?;
            model.store.get_mut(id).data_mut().copy_from_slice(&values);
        }
        let mut trainer = Trainer::with_model(cfg, model);
        for which in 0..2 {
            let step = r.u64()?;
            let at = r.pos;
            let n = r.u32()? as usize;
            let opt = if which == 0 { &trainer.main_opt } else { &trainer.disc_opt };
            if n != opt.params.len() {
                return Err(r.fail(at, "optimizer parameter count mismatch"));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for k in 0..n {
                let at = r.pos;
                let name = r.string()?;
                if name != trainer.model.store.name_by_index(opt.params[k]) {
                    return Err(r.fail(at, &format!("optimizer record `{name}` out of order")));
                }
                let len = r.u32()? as usize;
                if len != opt.m[k].len() {
                    return Err(r.fail(at, "optimizer moment length mismatch"));
                }
                m.push(r.f64s(len)?);
                v.push(r.f64s(len)?);
            }
            let opt = if which == 0 { &mut trainer.main_opt } else { &mut trainer.disc_opt };
            opt.step = step;
            opt.m = m;
            opt.v = v;
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        trainer.rng = rng;
        trainer.epoch = epoch;
        Ok(trainer)
    }
}

/// Names of the scalars checked by [`loss_gradient_check`], in order.
pub const CHECKED_LOSSES: [&str; 8] = ["l_er", "l_aed", "l_aec", "l_d", "l_g", "l_lcl", "l_lcl_self", "total"];

/// Finite-difference check of every loss term through the full model on a
/// synthetic micro-batch of `samples` utterances, probing
/// `probes_per_param` random components of every parameter tensor. The
/// first two utterances share a label so the contrastive term has a
/// positive pair; `l_lcl_self` is the variant whose normalizer includes the
/// anchor itself. Dropout is active with a fixed mask.
pub fn loss_gradient_check(
    cfg: &Config,
    samples: usize,
    probes_per_param: usize,
    epsilon: f64,
) -> Result<Vec<(&'static str, ProbeReport)>> {
    if samples < 2 {
        return Err(Error::validation("samples", "need at least two"));
    }
    let model = Model::new(cfg.model(), cfg.seed)?;
    let mut utts = generate_synthetic(&cfg.synth(0), samples)?;
    for (i, u) in utts.iter_mut().enumerate() {
        u.emotion = if i < 2 { 0 } else { i % cfg.emotions };
    }
    let ds = Dataset::new(utts);
    let batch = Batch::from_indices(&ds, &(0..samples).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let probes: Vec<Probe> = (0..model.store.len())
        .flat_map(|p| {
            let n = model.store.tensor_by_index(p).numel();
            (0..probes_per_param.min(n)).map(|_| (p, rng.gen_range(0..n))).collect::<Vec<_>>()
        })
        .map(|(param, index)| Probe { param, index })
        .collect();
    let w = cfg.loss_weights();
    let opts = ForwardOptions {
        tau: cfg.tau,
        aed_reduction: cfg.aed_reduction,
        lcl_include_self: false,
        auxiliary: true,
    };
    let reports = check_param_gradients(&model.store, &probes, epsilon, |tape, params| {
        let ctx = Ctx::new(tape, params, true, cfg.dropout, 17);
        let out = model.forward_batch(&ctx, &batch, opts)?;
        let (gan, _) = model.gan_terms(&ctx, &out.items, false)?;
        let lcl = out.l_lcl.expect("at least two samples");
        let lcl_self = crate::objectives::lcl_loss(out.pooled, &batch.emotions, cfg.tau, true)?;
        let (aed, aec) = (
            out.l_aed
                .ok_or_else(|| Error::invalid("gradcheck", "model has no correction heads"))?,
            out.l_aec
                .ok_or_else(|| Error::invalid("gradcheck", "model has no correction heads"))?,
        );
        let total = out
            .l_er
            .add(aed.scale(w.alpha * w.beta))?
            .add(aec.scale(w.alpha))?
            .add(gan.l_gan.scale(w.gamma))?
            .add(lcl.scale(w.lambda))?;
        Ok(vec![out.l_er, aed, aec, gan.l_d, gan.l_g, lcl, lcl_self, total])
    })?;
    Ok(CHECKED_LOSSES.into_iter().zip(reports).collect())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail(self.pos, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let b = self.bytes_field()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail(at, "name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        Config {
            d: 8,
            attention_heads: 2,
            attention_layers: 1,
            ff_dim: 16,
            feat_dim: 4,
            d_vocab: 40,
            emotions: 3,
            batch_size: 4,
            epochs: 2,
            speech_len_min: 3,
            speech_len_max: 6,
            text_len_min: 2,
            text_len_max: 4,
            train_size: 8,
            seed: 3,
            ..Config::default()
        }
    }

    fn data(cfg: &Config, n: usize) -> Dataset {
        Dataset::new(generate_synthetic(&cfg.synth(0), n).unwrap())
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let reports = loss_gradient_check(&tiny_cfg(), 3, 2, 1e-6).unwrap();
        for (name, r) in &reports {
            eprintln!("{name}: {:.3e} over {} probes", r.max_error, r.probes);
            assert!(r.max_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn downstream_trains_with_frozen_encoders() {
        let cfg = Config {
            dropout: 0.0,
            ..tiny_cfg()
        };
        let ds = data(&cfg, 4);
        let batch = Batch::from_indices(&ds, &[0, 1, 2, 3]);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let is_encoder = |n: &str| n.starts_with("speech.") || n.starts_with("text.");
        let keep: Vec<usize> = t
            .main_opt
            .params
            .iter()
            .copied()
            .filter(|&i| !is_encoder(t.model.store.name_by_index(i)))
            .collect();
        t.main_opt = Adam::new(&t.model.store, keep, cfg.learning_rate);
        let encoders = t.model.store.hash_where(is_encoder);
        let totals: Vec<f64> = (0..20).map(|i| t.train_step(&batch, i).unwrap().losses.total).collect();
        assert_eq!(t.model.store.hash_where(is_encoder), encoders);
        assert!(totals[19] < totals[0], "{totals:?}");
    }

    #[test]
    fn steps_touch_only_their_groups() {
        let cfg = tiny_cfg();
        let ds = data(&cfg, 8);
        let mut t = Trainer::new(cfg).unwrap();
        t.audit = true;
        let batches = make_batches(&ds, 4, 0, false, true).unwrap();
        for (b, batch) in batches.iter().enumerate() {
            let r = t.train_step(batch, b).unwrap();
            assert!(r.losses.terms().iter().all(|(_, v)| v.is_finite()));
            assert!((r.losses.l_gan - r.losses.l_d - r.losses.l_g).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_keeps_updates_separate() {
        let cfg = Config { gamma: 0.0, ..tiny_cfg() };
        let ds = data(&cfg, 4);
        let mut t = Trainer::new(cfg).unwrap();
        t.audit = true;
        let batch = Batch::from_indices(&ds, &[0, 1, 2, 3]);
        let (disc0, main0) = (t.disc_hash(), t.main_hash());
        t.train_step(&batch, 0).unwrap();
        assert_ne!(t.disc_hash(), disc0);
        assert_ne!(t.main_hash(), main0);
    }

    #[test]
    fn discriminator_ascent_increases_l_d() {
        let cfg = Config {
            learning_rate: 1e-2,
            ..tiny_cfg()
        };
        let ds = data(&cfg, 4);
        let mut t = Trainer::new(cfg).unwrap();
        let batch = Batch::from_indices(&ds, &[0, 1, 2, 3]);
        let tape = Tape::new();
        let params = t.model.store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let out = t.model.forward_batch(&ctx, &batch, ForwardOptions::default()).unwrap();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..5 {
            let current = t.model.store.bind(&tape, |_| true);
            let (l_d, _, _) = t.discriminator_update(&tape, &current, &out.items, 0).unwrap();
            assert!(l_d > last, "{l_d} <= {last}");
            last = l_d;
        }
    }

    #[test]
    fn identical_runs_identical_losses() {
        let cfg = tiny_cfg();
        let ds = data(&cfg, 8);
        let run = || {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            let batches = make_batches(&ds, 4, 1, true, true).unwrap();
            (0..5).map(|s| t.train_step(&batches[s % 2], s).unwrap().losses).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_history_and_zero_epochs() {
        let cfg = tiny_cfg();
        let ds = data(&cfg, 8);
        let mut t = Trainer::new(Config { epochs: 0, ..cfg.clone() }).unwrap();
        let h0 = t.model.store.hash();
        let s = t.fit(&ds, Some(&ds), |_| {}).unwrap();
        assert!(s.history.is_empty());
        assert_eq!((s.best.hash(), s.best_epoch), (h0, 0));

        let mut t = Trainer::new(cfg).unwrap();
        let mut seen = 0;
        let s = t.fit(&ds, Some(&ds), |_| seen += 1).unwrap();
        assert_eq!((s.history.len(), seen), (2, 2));
        for r in &s.history {
            assert!(r.valid.is_some() && r.inv_score.is_some());
            assert!(r.losses.terms().iter().all(|(_, v)| v.is_finite()));
        }
        assert!(t.fit(&Dataset::new(vec![]), None, |_| {}).is_err());
    }

    #[test]
    fn checkpoint_round_trip_resume_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let ds = data(&cfg, 8);

        let mut straight = Trainer::new(cfg.clone()).unwrap();
        let full = straight.fit(&ds, None, |_| {}).unwrap();

        let mut first = Trainer::new(Config { epochs: 1, ..cfg.clone() }).unwrap();
        first.fit(&ds, None, |_| {}).unwrap();
        let path = dir.path().join("ckpt.m4sr");
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed.model.store.hash(), first.model.store.hash());
        assert_eq!(resumed.main_opt, first.main_opt);
        assert_eq!(resumed.disc_opt, first.disc_opt);
        assert_eq!(resumed.to_bytes(), first.to_bytes());
        resumed.cfg.epochs = 2;
        let rest = resumed.fit(&ds, None, |_| {}).unwrap();
        assert_eq!(rest.history.len(), 1);
        let (a, b) = (full.history[1].losses, rest.history[0].losses);
        for ((_, x), (_, y)) in a.terms().iter().zip(b.terms()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }

        let bytes = fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.m4sr");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = Trainer::load(&truncated).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        fs::write(&truncated, &wrong).unwrap();
        assert!(Trainer::load(&truncated).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn ablation_trains_emotion_loss_only() {
        let cfg = Config {
            modality: Modality::Speech,
            ..tiny_cfg()
        };
        let ds = data(&cfg, 8);
        let mut t = Trainer::new(cfg).unwrap();
        let disc0 = t.disc_hash();
        let s = t.fit(&ds, None, |_| {}).unwrap();
        assert_eq!(t.disc_hash(), disc0);
        for r in &s.history {
            assert_eq!((r.losses.l_gan, r.losses.l_aed), (0.0, 0.0));
            assert!(r.inv_score.is_none());
        }
    }
}
