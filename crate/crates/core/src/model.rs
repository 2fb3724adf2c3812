//! The assembled network and its per-batch forward pass.
//!
//! Parameters are created in a fixed order (speech encoder, text encoder,
//! fusion, emotion head, discriminator, then the detection and correction
//! heads) so that a model built without the correction heads receives the
//! same initial values for everything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aec::{aec_loss, AecDecoder};
use crate::aed::{aed_loss_batch, predicted_labels, AedHead, Reduction};
use crate::align::{CorrectionTask, EditLabel};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Batch, Utterance};
use crate::encoders::{AcousticEncoder, EncoderDims, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fused_mask, FusionModule, FusionOutputs};
use crate::heads::{EmotionHead, EmotionOutput, ModalityDiscriminator};
use crate::layers::Ctx;
use crate::objectives::{er_loss, gan_losses, lcl_loss, DiscriminatorScores};
use crate::params::ParamStore;

/// Which representation feeds the emotion classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Full fusion of speech and ASR text.
    #[default]
    Both,
    /// Pooled speech-encoder output only.
    Speech,
    /// Pooled text-encoder output only.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub feat_dim: usize,
    pub stride: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub emotions: usize,
    pub disc_hidden: usize,
    pub decoder_layers: usize,
    pub modality: Modality,
    /// Build the detection and correction heads.
    pub correction_heads: bool,
}

impl ModelConfig {
    fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            ff: self.ff,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub acoustic: AcousticEncoder,
    pub text: TextEncoder,
    pub fusion: FusionModule,
    pub emotion: EmotionHead,
    pub disc: ModalityDiscriminator,
    pub aed: Option<AedHead>,
    pub aec: Option<AecDecoder>,
}

/// Everything computed for one utterance.
#[derive(Debug, Clone)]
pub struct ItemForward<'t> {
    pub h_s: Option<Var<'t>>,
    pub h_t: Option<Var<'t>>,
    pub frame_mask: Vec<bool>,
    pub token_mask: Vec<bool>,
    pub fusion: Option<FusionOutputs<'t>>,
    pub emotion: EmotionOutput<'t>,
    pub aed_probs: Option<Var<'t>>,
}

/// Batch-level outputs and differentiable loss terms.
#[derive(Debug, Clone)]
pub struct BatchForward<'t> {
    pub items: Vec<ItemForward<'t>>,
    /// `[B, d]`.
    pub pooled: Var<'t>,
    /// `[B, e]`.
    pub probs: Var<'t>,
    pub l_er: Var<'t>,
    pub l_aed: Option<Var<'t>>,
    pub l_aec: Option<Var<'t>>,
    /// `None` for a single-item batch.
    pub l_lcl: Option<Var<'t>>,
}

/// Settings of the auxiliary objectives used by [`Model::forward_batch`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub tau: f64,
    pub aed_reduction: Reduction,
    pub lcl_include_self: bool,
    /// Compute detection/correction losses when the heads exist.
    pub auxiliary: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            tau: 0.07,
            aed_reduction: Reduction::Mean,
            lcl_include_self: false,
            auxiliary: true,
        }
    }
}

/// Differentiable adversarial terms for a batch.
#[derive(Debug, Clone, Copy)]
pub struct GanTerms<'t> {
    pub l_d: Var<'t>,
    pub l_g: Var<'t>,
    pub l_gan: Var<'t>,
}

pub const AED_PREFIX: &str = "aed";
pub const AEC_PREFIX: &str = "aec";

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.vocab <= crate::align::RESERVED_IDS as usize {
            return Err(Error::validation("d_vocab", "must exceed the reserved ids"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = cfg.encoder_dims();
        let acoustic = AcousticEncoder::new(&mut store, "speech", cfg.feat_dim, cfg.stride, dims, &mut rng)?;
        let text = TextEncoder::new(&mut store, "text", cfg.vocab, dims, &mut rng)?;
        let fusion = FusionModule::new(&mut store, "fusion", cfg.d, cfg.heads, cfg.ff, &mut rng)?;
        let emotion = EmotionHead::new(&mut store, "emotion", cfg.d, cfg.emotions, &mut rng);
        let disc = ModalityDiscriminator::new(&mut store, cfg.d, cfg.disc_hidden, &mut rng);
        let (aed, aec) = if cfg.correction_heads {
            (
                Some(AedHead::new(&mut store, AED_PREFIX, cfg.d, &mut rng)),
                Some(AecDecoder::new(
                    &mut store,
                    AEC_PREFIX,
                    cfg.d,
                    cfg.heads,
                    cfg.ff,
                    cfg.decoder_layers,
                    cfg.vocab,
                    &mut rng,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            store,
            acoustic,
            text,
            fusion,
            emotion,
            disc,
            aed,
            aec,
        })
    }

    pub fn is_correction_param(name: &str) -> bool {
        name.starts_with(AED_PREFIX) || name.starts_with(AEC_PREFIX)
    }

    /// Runs one (possibly padded) utterance through the encoders, fusion
    /// and emotion head, plus the detection head when requested.
    pub fn forward_item<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        speech: &Tensor,
        speech_len: usize,
        tokens: &[u32],
        token_len: usize,
        with_detection: bool,
    ) -> Result<ItemForward<'t>> {
        let modality = self.cfg.modality;
        let speech_side = if modality != Modality::Text {
            let s = ctx.tape.leaf(speech);
            Some(self.acoustic.encode(ctx, s, speech_len)?)
        } else {
            None
        };
        let text_side = if modality != Modality::Speech {
            Some(self.text.encode(ctx, tokens, token_len)?)
        } else {
            None
        };
        let (h_s, frame_mask) = speech_side.map_or((None, Vec::new()), |(h, m)| (Some(h), m));
        let (h_t, token_mask) = text_side.map_or((None, Vec::new()), |(h, m)| (Some(h), m));

        let (fusion, emotion) = match (h_s, h_t) {
            (Some(hs), Some(ht)) => {
                let out = self.fusion.forward(ctx, hs, ht, &frame_mask, &token_mask)?;
                let emo = self.emotion.classify(ctx, out.fused, &fused_mask(&frame_mask))?;
                (Some(out), emo)
            }
            (Some(hs), None) => (None, self.emotion.classify(ctx, hs, &frame_mask)?),
            (None, Some(ht)) => (None, self.emotion.classify(ctx, ht, &token_mask)?),
            (None, None) => unreachable!("at least one modality is active"),
        };
        let aed_probs = match (&self.aed, h_t, with_detection) {
            (Some(head), Some(ht), true) => Some(head.detect(ctx, ht)?),
            _ => None,
        };
        Ok(ItemForward {
            h_s,
            h_t,
            frame_mask,
            token_mask,
            fusion,
            emotion,
            aed_probs,
        })
    }

    /// Forward pass over a padded batch with every differentiable loss term
    /// except the adversarial ones.
    pub fn forward_batch<'t>(&self, ctx: &Ctx<'_, 't>, batch: &Batch, opts: ForwardOptions) -> Result<BatchForward<'t>> {
        if batch.is_empty() {
            return Err(Error::invalid("forward_batch", "empty batch"));
        }
        let auxiliary = opts.auxiliary && self.cfg.modality == Modality::Both && self.aed.is_some();
        let items = (0..batch.len())
            .map(|i| {
                self.forward_item(
                    ctx,
                    &batch.speech[i],
                    batch.speech_lens[i],
                    &batch.asr_tokens[i],
                    batch.asr_lens[i],
                    auxiliary,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = Var::concat(&items.iter().map(|it| it.emotion.pooled).collect::<Vec<_>>(), 0)?;
        let probs = Var::concat(&items.iter().map(|it| it.emotion.probs).collect::<Vec<_>>(), 0)?;
        let l_er = er_loss(probs, &batch.emotions)?;
        let l_lcl = if batch.len() >= 2 {
            Some(lcl_loss(pooled, &batch.emotions, opts.tau, opts.lcl_include_self)?)
        } else {
            None
        };

        let (mut l_aed, mut l_aec) = (None, None);
        if auxiliary {
            let padded_labels: Vec<Vec<EditLabel>> = (0..batch.len())
                .map(|i| {
                    let mut labels = batch.scripts[i].labels.clone();
                    labels.resize(batch.asr_tokens[i].len(), EditLabel::Keep);
                    labels
                })
                .collect();
            let triples: Vec<(Var<'t>, &[EditLabel], &[bool])> = items
                .iter()
                .zip(&padded_labels)
                .map(|(it, labels)| {
                    (
                        it.aed_probs.expect("detection computed"),
                        labels.as_slice(),
                        it.token_mask.as_slice(),
                    )
                })
                .collect();
            l_aed = Some(aed_loss_batch(&triples, opts.aed_reduction)?);

            let aec = self.aec.as_ref().expect("correction heads present");
            let mut logits = Vec::new();
            let mut tasks: Vec<&CorrectionTask> = Vec::new();
            for (it, script) in items.iter().zip(&batch.scripts) {
                let h_t = it.h_t.expect("text encoded");
                logits.extend(aec.teacher_forced(ctx, &self.text.embedding, h_t, &it.token_mask, &script.tasks)?);
                tasks.extend(script.tasks.iter());
            }
            l_aec = Some(aec_loss(ctx.tape, &logits, &tasks)?);
        }
        Ok(BatchForward {
            items,
            pooled,
            probs,
            l_er,
            l_aed,
            l_aec,
            l_lcl,
        })
    }

    /// Discriminator scores on each item's fused representations, optionally
    /// on gradient-detached copies, and the resulting adversarial terms.
    pub fn gan_terms<'t>(&self, ctx: &Ctx<'_, 't>, items: &[ItemForward<'t>], detach: bool) -> Result<(GanTerms<'t>, Vec<ItemScores<'t>>)> {
        let mut scores = Vec::with_capacity(items.len());
        for it in items {
            let f = it
                .fusion
                .ok_or_else(|| Error::invalid("gan_terms", "adversarial terms need the fused model"))?;
            let pick = |v: Var<'t>| if detach { v.detach() } else { v };
            scores.push(ItemScores {
                spe_s: self.disc.scores(ctx, pick(f.spe_s))?,
                spe_t: self.disc.scores(ctx, pick(f.spe_t))?,
                inv: self.disc.scores(ctx, pick(f.inv))?,
            });
        }
        let views: Vec<DiscriminatorScores<'_, 't>> = scores
            .iter()
            .zip(items)
            .map(|(s, it)| DiscriminatorScores {
                spe_s: s.spe_s,
                spe_t: s.spe_t,
                inv: s.inv,
                mask: &it.frame_mask,
            })
            .collect();
        let (l_d, l_g, l_gan) = gan_losses(ctx.tape, &views)?;
        Ok((GanTerms { l_d, l_g, l_gan }, scores))
    }

    /// Emotion class probabilities for one utterance. Only the encoders,
    /// fusion and emotion head are evaluated.
    pub fn predict_probs(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.store.bind(&tape, |_| false);
        let ctx = Ctx::eval(&tape, &params);
        let out = self.forward_item(&ctx, &utt.speech, utt.frames(), &utt.asr_tokens, utt.asr_tokens.len(), false)?;
        Ok(out.emotion.probs.data())
    }

    pub fn predict(&self, utt: &Utterance) -> Result<usize> {
        let probs = self.predict_probs(utt)?;
        Ok((0..probs.len()).fold(0, |b, j| if probs[j] > probs[b] { j } else { b }))
    }

    /// Pooled `[d]` representation used for classification.
    pub fn pooled(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.store.bind(&tape, |_| false);
        let ctx = Ctx::eval(&tape, &params);
        let out = self.forward_item(&ctx, &utt.speech, utt.frames(), &utt.asr_tokens, utt.asr_tokens.len(), false)?;
        Ok(out.emotion.pooled.data())
    }

    /// Detection labels for the ASR tokens and the corrected transcript.
    /// With `ungated`, every token is treated as needing correction.
    pub fn correct(&self, utt: &Utterance, max_span: usize, ungated: bool) -> Result<(Vec<EditLabel>, Vec<u32>)> {
        let (Some(aed), Some(aec)) = (&self.aed, &self.aec) else {
            return Err(Error::invalid("correct", "model was built without correction heads"));
        };
        let tape = Tape::new();
        let params = self.store.bind(&tape, |_| false);
        let ctx = Ctx::eval(&tape, &params);
        let n = utt.asr_tokens.len();
        let (h_t, mask) = self.text.encode(&ctx, &utt.asr_tokens, n)?;
        let labels = if ungated {
            vec![EditLabel::Change; n]
        } else {
            predicted_labels(&aed.detect(&ctx, h_t)?.data(), n)
        };
        let out = aec.greedy_correct(&ctx, &self.text.embedding, &utt.asr_tokens, h_t, &mask, &labels, max_span)?;
        Ok((labels, out))
    }
}

/// Discriminator outputs `[m, 1]` for one item.
#[derive(Debug, Clone, Copy)]
pub struct ItemScores<'t> {
    pub spe_s: Var<'t>,
    pub spe_t: Var<'t>,
    pub inv: Var<'t>,
}
