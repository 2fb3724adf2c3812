//! Emotion classifier over pooled fused features, and the per-frame
//! modality discriminator.

use rand::Rng;

use crate::autodiff::{Axis, Var};
use crate::error::{Error, Result};
use crate::layers::{Ctx, LinearLayer};
use crate::params::ParamStore;

/// Discriminator outputs are clamped to `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EmotionHead {
    pub fc: LinearLayer,
    pub classes: usize,
}

/// Pooled representation, class logits and class probabilities.
#[derive(Debug, Clone, Copy)]
pub struct EmotionOutput<'t> {
    pub pooled: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

impl EmotionHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc: LinearLayer::new(store, &format!("{name}.fc"), d, classes, rng),
            classes,
        }
    }

    /// Mask-aware temporal average pooling followed by `softmax(FC(.))`.
    /// Every returned tensor has a leading axis of one row.
    pub fn classify<'t>(&self, ctx: &Ctx<'_, 't>, fused: Var<'t>, mask: &[bool]) -> Result<EmotionOutput<'t>> {
        if !mask.iter().any(|&v| v) {
            return Err(Error::invalid("classify_emotion", "no valid frames"));
        }
        let (_, d) = fused.dims2();
        let pooled = fused.mean(Axis::Rows, Some(mask))?.reshape(&[1, d])?;
        let logits = self.fc.apply(ctx, pooled)?;
        let probs = logits.softmax_rows(None)?;
        Ok(EmotionOutput { pooled, logits, probs })
    }
}

/// `Linear(d -> h) -> ReLU -> Linear(h -> 1) -> sigmoid`, clamped.
#[derive(Debug, Clone)]
pub struct ModalityDiscriminator {
    pub hidden: LinearLayer,
    pub out: LinearLayer,
}

impl ModalityDiscriminator {
    pub const PREFIX: &'static str = "discriminator";

    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: LinearLayer::new(store, &format!("{}.hidden", Self::PREFIX), d, hidden, rng),
            out: LinearLayer::new(store, &format!("{}.out", Self::PREFIX), hidden, 1, rng),
        }
    }

    /// Per-frame scores `[m, 1]`.
    pub fn scores<'t>(&self, ctx: &Ctx<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        let z = self.hidden.apply(ctx, h)?.relu();
        Ok(self.out.apply(ctx, z)?.sigmoid().clamp(SCORE_EPS, 1.0 - SCORE_EPS))
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with(Self::PREFIX)
    }
}
