//! Trainable-from-scratch acoustic and text encoders producing `H_S` and `H_T`.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Ctx, EmbeddingTable, LinearLayer, TransformerEncoderLayer};
use crate::params::{xavier_uniform, ParamId, ParamStore};

/// Shape hyperparameters shared by both encoders.
#[derive(Debug, Clone, Copy)]
pub struct EncoderDims {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub max_len: usize,
}

/// Strided frame-stacking front-end (a 1-D convolution whose kernel equals
/// its stride) followed by learned positions and transformer layers.
#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub frontend: LinearLayer,
    pub positions: ParamId,
    pub layers: Vec<TransformerEncoderLayer>,
    pub feat_dim: usize,
    pub stride: usize,
    pub max_len: usize,
}

/// Number of encoder frames produced from `raw` input frames.
pub fn downsampled_len(raw: usize, stride: usize) -> usize {
    raw.div_ceil(stride)
}

impl AcousticEncoder {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, stride: usize, dims: EncoderDims, rng: &mut impl Rng) -> Result<Self> {
        if stride == 0 || feat_dim == 0 {
            return Err(Error::invalid("acoustic-encoder", "stride and feature dim must be positive"));
        }
        let frontend = LinearLayer::new(store, &format!("{name}.frontend"), stride * feat_dim, dims.d, rng);
        let positions = store.add(format!("{name}.positions"), xavier_uniform(rng, dims.max_len, dims.d));
        let layers = (0..dims.layers)
            .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.layer{i}"), dims.d, dims.heads, dims.ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            frontend,
            positions,
            layers,
            feat_dim,
            stride,
            max_len: dims.max_len,
        })
    }

    /// Encodes a (possibly padded) `[rows, feat_dim]` feature block of which
    /// the first `len` rows are real. Returns `H_S` with one row per
    /// `stride` padded input rows and the frame validity mask.
    pub fn encode<'t>(&self, ctx: &Ctx<'_, 't>, speech: Var<'t>, len: usize) -> Result<(Var<'t>, Vec<bool>)> {
        let shape = speech.shape();
        if shape.len() != 2 || shape[1] != self.feat_dim {
            return Err(Error::Shape {
                op: "encode-speech",
                lhs: shape,
                rhs: vec![self.feat_dim],
            });
        }
        let rows = shape[0];
        if len == 0 || rows == 0 {
            return Err(Error::invalid("encode-speech", "empty speech input"));
        }
        if len > rows {
            return Err(Error::invalid("encode-speech", format!("length {len} exceeds {rows} rows")));
        }
        let m = downsampled_len(rows, self.stride);
        if m > self.max_len {
            return Err(Error::invalid(
                "encode-speech",
                format!("{m} frames exceed max_len {}", self.max_len),
            ));
        }
        let raw_valid: Vec<bool> = (0..rows).map(|i| i < len).collect();
        let mut x = speech.mask_rows(&raw_valid)?;
        if m * self.stride > rows {
            let extra = m * self.stride - rows;
            let zeros = ctx.constant(vec![extra, self.feat_dim], vec![0.0; extra * self.feat_dim])?;
            x = Var::concat(&[x, zeros], 0)?;
        }
        let x = x.reshape(&[m, self.stride * self.feat_dim])?;
        let pos: Vec<usize> = (0..m).collect();
        let mut h = self.frontend.apply(ctx, x)?.add(ctx.p(self.positions).gather_rows(&pos)?)?;
        h = ctx.apply_dropout(h)?;
        let valid_frames = downsampled_len(len, self.stride);
        let mask: Vec<bool> = (0..m).map(|i| i < valid_frames).collect();
        for layer in &self.layers {
            h = layer.forward(ctx, h, &mask)?;
        }
        Ok((h, mask))
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: EmbeddingTable,
    pub layers: Vec<TransformerEncoderLayer>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dims: EncoderDims, rng: &mut impl Rng) -> Result<Self> {
        let embedding = EmbeddingTable::new(store, &format!("{name}.embedding"), vocab, dims.max_len, dims.d, rng);
        let layers = (0..dims.layers)
            .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.layer{i}"), dims.d, dims.heads, dims.ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embedding, layers })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.vocab
    }

    /// Encodes `tokens`, of which the first `len` are real, into `H_T`.
    pub fn encode<'t>(&self, ctx: &Ctx<'_, 't>, tokens: &[u32], len: usize) -> Result<(Var<'t>, Vec<bool>)> {
        if len == 0 || tokens.is_empty() {
            return Err(Error::invalid("encode-text", "empty token sequence"));
        }
        if len > tokens.len() {
            return Err(Error::invalid(
                "encode-text",
                format!("length {len} exceeds {} tokens", tokens.len()),
            ));
        }
        let mut h = self.embedding.embed(ctx, tokens)?;
        h = ctx.apply_dropout(h)?;
        let mask: Vec<bool> = (0..tokens.len()).map(|i| i < len).collect();
        for layer in &self.layers {
            h = layer.forward(ctx, h, &mask)?;
        }
        Ok((h, mask))
    }
}
