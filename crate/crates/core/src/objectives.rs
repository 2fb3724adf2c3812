//! Loss terms and their weighted combination.
//!
//! `total = er + alpha * (beta * aed + aec) + gamma * gan + lambda * lcl`.
//! The generator-side training objective substitutes `l_g` for `l_gan`.

use serde::{Deserialize, Serialize};

use crate::aed::nll_sum;
use crate::autodiff::{Axis, Tape, Var, LOG_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 3.0,
            gamma: 0.01,
            lambda: 0.1,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be a non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation("tau", format!("must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_er: f64,
    pub l_aed: f64,
    pub l_aec: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_gan: f64,
    pub l_lcl: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("l_er", self.l_er),
            ("l_aed", self.l_aed),
            ("l_aec", self.l_aec),
            ("l_d", self.l_d),
            ("l_g", self.l_g),
            ("l_gan", self.l_gan),
            ("l_lcl", self.l_lcl),
            ("total", self.total),
        ]
    }

    /// Element-wise running mean update with `n` previous entries.
    pub fn accumulate(&mut self, other: &LossBundle, n: usize) {
        let w = 1.0 / (n + 1) as f64;
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.l_er, other.l_er);
        mix(&mut self.l_aed, other.l_aed);
        mix(&mut self.l_aec, other.l_aec);
        mix(&mut self.l_d, other.l_d);
        mix(&mut self.l_g, other.l_g);
        mix(&mut self.l_gan, other.l_gan);
        mix(&mut self.l_lcl, other.l_lcl);
        mix(&mut self.total, other.total);
    }
}

/// Mean over the batch of `-log probs[label]`, with the log floored.
pub fn er_loss<'t>(probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (total, count) = nll_sum(probs, labels, None)?;
    if count == 0 {
        return Err(Error::invalid("er_loss", "empty batch"));
    }
    Ok(total.scale(1.0 / count as f64))
}

/// Per-utterance discriminator scores `[m, 1]` with their frame masks.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorScores<'a, 't> {
    pub spe_s: Var<'t>,
    pub spe_t: Var<'t>,
    pub inv: Var<'t>,
    pub mask: &'a [bool],
}

/// `(l_d, l_g, l_gan)` with expectations over every valid frame in the batch.
pub fn gan_losses<'t>(tape: &'t Tape, items: &[DiscriminatorScores<'_, 't>]) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let frames: usize = items.iter().map(|s| s.mask.iter().filter(|&&v| v).count()).sum();
    if frames == 0 {
        return Err(Error::invalid("gan_losses", "no valid frames"));
    }
    let mut real = tape.scalar(0.0);
    let mut fake = tape.scalar(0.0);
    let mut gen = tape.scalar(0.0);
    for s in items {
        let m = Some(s.mask);
        real = real.add(s.spe_s.log_floor(LOG_FLOOR).sum(Axis::All, m)?)?;
        fake = fake.add(one_minus(s.spe_t).log_floor(LOG_FLOOR).sum(Axis::All, m)?)?;
        let inv_term = s.inv.log_floor(LOG_FLOOR).add(one_minus(s.inv).log_floor(LOG_FLOOR))?;
        gen = gen.sub(inv_term.sum(Axis::All, m)?)?;
    }
    let w = 1.0 / frames as f64;
    let l_d = real.add(fake)?.scale(w);
    let l_g = gen.scale(w);
    let l_gan = l_d.add(l_g)?;
    Ok((l_d, l_g, l_gan))
}

fn one_minus(v: Var<'_>) -> Var<'_> {
    v.neg().add_scalar(1.0)
}

/// Supervised contrastive loss over pooled vectors `[B, d]` using cosine
/// similarity scaled by `1/tau`. Positives of anchor `i` are the other
/// samples with its label; the normalizer ranges over every other sample,
/// or over the whole batch when `include_self` is set. Anchors without
/// positives are skipped and the result is averaged over the rest.
pub fn lcl_loss<'t>(pooled: Var<'t>, labels: &[usize], tau: f64, include_self: bool) -> Result<Var<'t>> {
    let (b, _) = pooled.dims2();
    if b < 2 || labels.len() != b {
        return Err(Error::invalid(
            "lcl_loss",
            format!("need at least two samples with labels, got {b} rows and {} labels", labels.len()),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::validation("tau", "must be positive"));
    }
    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(pooled.tape().scalar(0.0));
    }
    let logits = pooled.cosine_similarity(pooled)?.scale(1.0 / tau);
    let mask: Vec<bool> = (0..b * b).map(|k| include_self || k / b != k % b).collect();
    let log_prob = logits.log_softmax_rows(Some(&mask))?;
    let mut weights = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                weights[i * b + j] = 1.0 / (positives[i] * anchors) as f64;
            }
        }
    }
    let weights = pooled.tape().constant(vec![b, b], weights)?;
    Ok(log_prob.mul(weights)?.sum_all()?.neg())
}

/// Unweighted loss values entering the overall objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub er: f64,
    pub aed: f64,
    pub aec: f64,
    pub gan: f64,
    pub lcl: f64,
}

pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<f64> {
    for (term, v) in [
        ("l_er", parts.er),
        ("l_aed", parts.aed),
        ("l_aec", parts.aec),
        ("l_gan", parts.gan),
        ("l_lcl", parts.lcl),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, batch: None });
        }
    }
    Ok(parts.er + w.alpha * (w.beta * parts.aed + parts.aec) + w.gamma * parts.gan + w.lambda * parts.lcl)
}
