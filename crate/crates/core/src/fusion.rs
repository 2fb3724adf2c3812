//! Cross-modal fusion: modality-specific representations from three
//! cross-modal encoder blocks, the modality-invariant generator with
//! hybrid-modal attention, and the final time-axis fusion.
//!
//! Text rows are aligned to speech frames by nearest-index resampling,
//! `j = floor(i * n / m)`, using the true lengths of both sequences.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{key_mask, AttentionBlock, Ctx, LayerNorm, LinearLayer, MultiHeadAttention, Prelu};
use crate::params::ParamStore;

/// Every intermediate of one fusion pass. Speech-aligned tensors have `m`
/// rows, text-aligned ones `n` rows.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutputs<'t> {
    pub h_s: Var<'t>,
    pub h_t: Var<'t>,
    pub speech_aware_text: Var<'t>,
    pub spe_s: Var<'t>,
    pub spe_t: Var<'t>,
    pub joint_raw: Var<'t>,
    pub joint: Var<'t>,
    pub share_s: Var<'t>,
    pub share_t: Var<'t>,
    pub gated_s: Var<'t>,
    pub gated_t: Var<'t>,
    pub inv: Var<'t>,
    pub fused: Var<'t>,
}

/// `floor(i * n / m)` for each of `m` frames.
pub fn resample_indices(m: usize, n: usize) -> Vec<usize> {
    (0..m).map(|i| i * n / m).collect()
}

/// Cross-attention from the joint representation into one modality's
/// specific representation, gated by `sigmoid(FC(spe || joint))`.
#[derive(Debug, Clone)]
pub struct HybridModalAttention {
    pub attention: MultiHeadAttention,
    pub gate: LinearLayer,
}

impl HybridModalAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), d, heads, rng)?,
            gate: LinearLayer::new(store, &format!("{name}.gate"), 2 * d, d, rng),
        })
    }

    /// Returns `(shared, gate, gated)`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        spe: Var<'t>,
        joint: Var<'t>,
        frame_valid: &[bool],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let mask = key_mask(joint.dims2().0, frame_valid);
        let share = self.attention.forward(ctx, joint, spe, Some(&mask))?;
        let gate = self.gate.apply(ctx, Var::concat(&[spe, joint], 1)?)?.sigmoid();
        let gated = share.mul(gate)?;
        Ok((share, gate, gated))
    }
}

/// Joint projection, one hybrid-modal attention per modality, one 1x1
/// convolution with PReLU per modality, and a final layer norm.
#[derive(Debug, Clone)]
pub struct MirGenerator {
    pub joint_proj: LinearLayer,
    pub hma_s: HybridModalAttention,
    pub hma_t: HybridModalAttention,
    pub conv_s: LinearLayer,
    pub act_s: Prelu,
    pub conv_t: LinearLayer,
    pub act_t: Prelu,
    pub norm: LayerNorm,
}

impl MirGenerator {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            joint_proj: LinearLayer::new(store, &format!("{name}.joint_proj"), 2 * d, d, rng),
            hma_s: HybridModalAttention::new(store, &format!("{name}.hma_s"), d, heads, rng)?,
            hma_t: HybridModalAttention::new(store, &format!("{name}.hma_t"), d, heads, rng)?,
            conv_s: LinearLayer::new(store, &format!("{name}.conv_s"), d, d, rng),
            act_s: Prelu::new(store, &format!("{name}.act_s")),
            conv_t: LinearLayer::new(store, &format!("{name}.conv_t"), d, d, rng),
            act_t: Prelu::new(store, &format!("{name}.act_t")),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
        })
    }

    /// `(H_ST_raw [m, 2d], projected joint [m, d])`.
    pub fn joint_rep<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        h_s: Var<'t>,
        h_t: Var<'t>,
        speech_len: usize,
        text_len: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (m, _) = h_s.dims2();
        if speech_len == 0 || text_len == 0 || speech_len > m || text_len > h_t.dims2().0 {
            return Err(Error::invalid(
                "joint-rep",
                format!("lengths ({speech_len}, {text_len}) invalid for {m} frames"),
            ));
        }
        let mut idx = resample_indices(speech_len, text_len);
        idx.resize(m, 0);
        let aligned = h_t.gather_rows(&idx)?;
        let raw = Var::concat(&[h_s, aligned], 1)?;
        let joint = self.joint_proj.apply(ctx, raw)?;
        Ok((raw, joint))
    }

    /// `LayerNorm(joint + PReLU(conv_s(b_s)) + PReLU(conv_t(b_t)))`.
    pub fn combine<'t>(&self, ctx: &Ctx<'_, 't>, joint: Var<'t>, gated_s: Var<'t>, gated_t: Var<'t>) -> Result<Var<'t>> {
        let s = self.act_s.apply(ctx, self.conv_s.apply(ctx, gated_s)?)?;
        let t = self.act_t.apply(ctx, self.conv_t.apply(ctx, gated_t)?)?;
        self.norm.apply(ctx, joint.add(s)?.add(t)?)
    }
}

/// Time-axis concatenation `[spe_s; spe_t; inv]`.
pub fn fuse_representations<'t>(spe_s: Var<'t>, spe_t: Var<'t>, inv: Var<'t>) -> Result<Var<'t>> {
    let shape = spe_s.shape();
    if shape.len() != 2 || spe_t.shape() != shape || inv.shape() != shape {
        return Err(Error::Shape {
            op: "fuse",
            lhs: shape,
            rhs: if spe_t.shape() != spe_s.shape() {
                spe_t.shape()
            } else {
                inv.shape()
            },
        });
    }
    Var::concat(&[spe_s, spe_t, inv], 0)
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    /// Text queries speech.
    pub cme_text_speech: AttentionBlock,
    /// Speech queries the speech-aware text.
    pub cme_speech_refine: AttentionBlock,
    /// Speech queries text.
    pub cme_speech_text: AttentionBlock,
    pub mir: MirGenerator,
}

impl FusionModule {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            cme_text_speech: AttentionBlock::new(store, &format!("{name}.cme_ts"), d, heads, ff, rng)?,
            cme_speech_refine: AttentionBlock::new(store, &format!("{name}.cme_ss"), d, heads, ff, rng)?,
            cme_speech_text: AttentionBlock::new(store, &format!("{name}.cme_st"), d, heads, ff, rng)?,
            mir: MirGenerator::new(store, &format!("{name}.mir"), d, heads, rng)?,
        })
    }

    /// `(spe_s [m,d], spe_t [m,d], speech-aware text [n,d])`.
    pub fn modality_specific<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        h_s: Var<'t>,
        h_t: Var<'t>,
        frame_valid: &[bool],
        token_valid: &[bool],
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let speech_aware_text = self.cme_text_speech.forward(ctx, h_t, h_s, frame_valid)?;
        let spe_s = self.cme_speech_refine.forward(ctx, h_s, speech_aware_text, token_valid)?;
        let spe_t = self.cme_speech_text.forward(ctx, h_s, h_t, token_valid)?;
        Ok((spe_s, spe_t, speech_aware_text))
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        h_s: Var<'t>,
        h_t: Var<'t>,
        frame_valid: &[bool],
        token_valid: &[bool],
    ) -> Result<FusionOutputs<'t>> {
        let (m, d) = h_s.dims2();
        let (n, _) = h_t.dims2();
        let speech_len = frame_valid.iter().filter(|&&v| v).count();
        let text_len = token_valid.iter().filter(|&&v| v).count();
        let (spe_s, spe_t, speech_aware_text) = self.modality_specific(ctx, h_s, h_t, frame_valid, token_valid)?;
        let (joint_raw, joint) = self.mir.joint_rep(ctx, h_s, h_t, speech_len, text_len)?;
        let (share_s, _, gated_s) = self.mir.hma_s.forward(ctx, spe_s, joint, frame_valid)?;
        let (share_t, _, gated_t) = self.mir.hma_t.forward(ctx, spe_t, joint, frame_valid)?;
        let inv = self.mir.combine(ctx, joint, gated_s, gated_t)?;
        let fused = fuse_representations(spe_s, spe_t, inv)?;

        let expect = [
            (speech_aware_text, [n, d]),
            (spe_s, [m, d]),
            (spe_t, [m, d]),
            (joint_raw, [m, 2 * d]),
            (joint, [m, d]),
            (share_s, [m, d]),
            (share_t, [m, d]),
            (gated_s, [m, d]),
            (gated_t, [m, d]),
            (inv, [m, d]),
            (fused, [3 * m, d]),
        ];
        for (v, shape) in expect {
            debug_assert_eq!(v.shape(), shape.to_vec());
        }
        Ok(FusionOutputs {
            h_s,
            h_t,
            speech_aware_text,
            spe_s,
            spe_t,
            joint_raw,
            joint,
            share_s,
            share_t,
            gated_s,
            gated_t,
            inv,
            fused,
        })
    }
}

/// Triplicated frame mask for the fused sequence.
pub fn fused_mask(frame_valid: &[bool]) -> Vec<bool> {
    frame_valid.repeat(3)
}
