//! Flat run configuration shared by the library and the command line.
//!
//! A config file is a TOML document with top-level keys only. Unknown keys
//! are rejected. Overrides use `key=value` with TOML value syntax; bare
//! words are taken as strings. A dotted key such as `train.epochs` names
//! its last segment, so grouped spellings resolve to the flat key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aed::Reduction;
use crate::autodiff::Precision;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig};
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Wa,
    Wf1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DtwMetric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // optimisation
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub selection_metric: SelectionMetric,
    pub precision: Precision,

    // model
    pub d: usize,
    pub d_vocab: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub ff_dim: usize,
    pub feat_dim: usize,
    pub stride: usize,
    pub max_len: usize,
    /// Discriminator hidden width; half of `d` when unset.
    pub disc_hidden: Option<usize>,
    pub decoder_layers: usize,
    pub max_correction_len: usize,
    pub emotions: usize,
    pub modality: Modality,

    // objective
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub aed_reduction: Reduction,
    pub lcl_include_self: bool,

    // synthetic corpus
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub target_wer: f64,
    pub speech_len_min: usize,
    pub speech_len_max: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    pub speech_cue: f64,
    pub text_cue: f64,
    pub noise: f64,
    pub split_cues: bool,

    // evaluation
    pub dtw_metric: DtwMetric,
}

impl Default for Config {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            batch_size: 16,
            epochs: 100,
            learning_rate: 1e-3,
            dropout: 0.1,
            seed: 0,
            grad_clip: 5.0,
            selection_metric: SelectionMetric::Wa,
            precision: Precision::F64,
            d: 32,
            d_vocab: 64,
            attention_layers: 2,
            attention_heads: 4,
            ff_dim: 64,
            feat_dim: 16,
            stride: 2,
            max_len: 512,
            disc_hidden: None,
            decoder_layers: 1,
            max_correction_len: crate::aec::DEFAULT_MAX_SPAN,
            emotions: 4,
            modality: Modality::Both,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            lambda: w.lambda,
            tau: w.tau,
            aed_reduction: Reduction::Mean,
            lcl_include_self: false,
            train_size: 256,
            valid_size: 64,
            test_size: 128,
            target_wer: 0.2,
            speech_len_min: 8,
            speech_len_max: 16,
            text_len_min: 4,
            text_len_max: 8,
            speech_cue: 1.0,
            text_cue: 0.6,
            noise: 0.5,
            split_cues: false,
            dtw_metric: DtwMetric::Cosine,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides and revalidates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("config round-trips");
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            let key = key.trim().rsplit('.').next().unwrap_or_default();
            let value = value.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("d", self.d),
            ("d_vocab", self.d_vocab),
            ("attention_heads", self.attention_heads),
            ("ff_dim", self.ff_dim),
            ("feat_dim", self.feat_dim),
            ("stride", self.stride),
            ("max_len", self.max_len),
            ("max_correction_len", self.max_correction_len),
            ("emotions", self.emotions),
            ("speech_len_min", self.speech_len_min),
            ("text_len_min", self.text_len_min),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be at least 2"));
        }
        if !self.d.is_multiple_of(self.attention_heads) {
            return Err(Error::validation("attention_heads", format!("must divide d = {}", self.d)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", "must lie in [0, 1)"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::validation("grad_clip", "must be positive"));
        }
        if self.disc_hidden == Some(0) {
            return Err(Error::validation("disc_hidden", "must be positive"));
        }
        self.loss_weights().validate()?;
        self.synth(0).validate()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            tau: self.tau,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.attention_heads,
            layers: self.attention_layers,
            ff: self.ff_dim,
            feat_dim: self.feat_dim,
            stride: self.stride,
            vocab: self.d_vocab,
            max_len: self.max_len,
            emotions: self.emotions,
            disc_hidden: self.disc_hidden.unwrap_or((self.d / 2).max(1)),
            decoder_layers: self.decoder_layers,
            modality: self.modality,
            correction_heads: true,
        }
    }

    /// Synthetic-corpus settings; `salt` separates train/valid/test streams.
    pub fn synth(&self, salt: u64) -> SynthConfig {
        SynthConfig {
            classes: self.emotions,
            vocab: self.d_vocab,
            feat_dim: self.feat_dim,
            speech_len: (self.speech_len_min, self.speech_len_max),
            text_len: (self.text_len_min, self.text_len_max),
            target_wer: self.target_wer,
            speech_cue: self.speech_cue,
            text_cue: self.text_cue,
            noise: self.noise,
            split_cues: self.split_cues,
            seed: self.seed,
            stream: salt,
        }
    }
}
