//! Multimodal speech emotion recognition: speech and ASR-text encoders,
//! cross-modal fusion into modality-specific and modality-invariant
//! representations, ASR error detection and correction as auxiliary tasks,
//! an adversarial modality discriminator and label-based contrastive
//! learning, all on a small self-contained autodiff engine.

pub mod aec;
pub mod aed;
pub mod align;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heads;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod train;

pub use error::{Error, Result};
