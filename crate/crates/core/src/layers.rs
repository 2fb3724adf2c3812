//! Neural building blocks assembled from autodiff primitives.
//!
//! Parameter counts (model width `d`, feed-forward width `f`):
//!
//! | block | parameters |
//! |-------|------------|
//! | [`LinearLayer`] `in -> out` | `in*out + out` |
//! | [`LayerNorm`] | `2d` |
//! | [`MultiHeadAttention`] | `4d^2 + 3d` (the key projection has no bias) |
//! | [`FeedForward`] | `2df + f + d` |
//! | [`AttentionBlock`] / [`TransformerEncoderLayer`] | attention + feed-forward + `4d` |
//! | [`TransformerDecoderLayer`] | two attentions + feed-forward + `6d` |
//! | [`EmbeddingTable`] | `(vocab + max_len) * d` |
//!
//! The key projection omits its bias because a per-key constant added to
//! every logit of a row is cancelled by the softmax.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{filled, xavier_uniform, ParamId, ParamStore, Params};

/// Everything a forward pass needs besides the inputs: the tape, the bound
/// parameters, the train/eval flag, and the seeded source for dropout masks.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a Params<'t>,
    pub train: bool,
    pub dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn new(tape: &'t Tape, params: &'a Params<'t>, train: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape,
            params,
            train,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Evaluation context: dropout disabled.
    pub fn eval(tape: &'t Tape, params: &'a Params<'t>) -> Self {
        Self::new(tape, params, false, 0.0, 0)
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id]
    }

    pub fn apply_dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        if !self.train || self.dropout == 0.0 {
            return Ok(x);
        }
        let seed = self.rng.borrow_mut().gen();
        x.dropout(self.dropout, true, seed)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'t>> {
        self.tape.constant(shape, data)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), filled(&[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// `x * W + b` along the trailing axis; rank-1 inputs give rank-1 outputs.
    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        if shape.len() == 1 {
            let y = x
                .reshape(&[1, self.in_dim])?
                .matmul(ctx.p(self.weight))?
                .add_row(ctx.p(self.bias))?;
            return y.reshape(&[self.out_dim]);
        }
        x.matmul(ctx.p(self.weight))?.add_row(ctx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), filled(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), filled(&[d], 0.0)),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias))
    }
}

/// Scalar-slope PReLU.
#[derive(Debug, Clone)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            slope: store.add(format!("{name}.slope"), filled(&[1], Self::INIT_SLOPE)),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.prelu(ctx.p(self.slope))
    }
}

/// Flattened `[q, k]` validity mask from per-key validity.
pub fn key_mask(q_len: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(q_len * keys.len());
    for _ in 0..q_len {
        m.extend_from_slice(keys);
    }
    m
}

/// Lower-triangular `[t, t]` mask combined with per-key validity.
pub fn causal_mask(keys: &[bool]) -> Vec<bool> {
    let t = keys.len();
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = keys[j];
        }
    }
    m
}

/// Scaled dot-product attention with `heads` heads, `1/sqrt(d/heads)` scaling.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d: usize,
    pub query: LinearLayer,
    pub key: ParamId,
    pub value: LinearLayer,
    pub output: LinearLayer,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(
                "cross-attention",
                format!("model dim {d} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            d,
            query: LinearLayer::new(store, &format!("{name}.query"), d, d, rng),
            key: store.add(format!("{name}.key.weight"), xavier_uniform(rng, d, d)),
            value: LinearLayer::new(store, &format!("{name}.value"), d, d, rng),
            output: LinearLayer::new(store, &format!("{name}.output"), d, d, rng),
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * d * d + 3 * d
    }

    /// Attention of `query` rows over `kv` rows. `mask` is a flattened
    /// `[q_len, k_len]` validity mask.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, query: Var<'t>, kv: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(ctx, query, kv, mask)?.0)
    }

    /// Like [`Self::forward`], also returning each head's `[q, k]` weights.
    pub fn forward_with_weights<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        query: Var<'t>,
        kv: Var<'t>,
        mask: Option<&[bool]>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let (qs, ks) = (query.shape(), kv.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.d || ks[1] != self.d {
            return Err(Error::Shape {
                op: "cross-attention",
                lhs: qs,
                rhs: ks,
            });
        }
        if ks[0] == 0 {
            return Err(Error::invalid("cross-attention", "no keys"));
        }
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.apply(ctx, query)?;
        let kt = kv.matmul(ctx.p(self.key))?.transpose()?;
        let v = self.value.apply(ctx, kv)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kt, v)
            } else {
                (q.slice(1, h * dh, dh)?, kt.slice(0, h * dh, dh)?, v.slice(1, h * dh, dh)?)
            };
            let w = qh.matmul(kh)?.scale(scale).softmax_rows(mask)?;
            outs.push(w.matmul(vh)?);
            weights.push(w);
        }
        let joined = if self.heads == 1 { outs[0] } else { Var::concat(&outs, 1)? };
        Ok((self.output.apply(ctx, joined)?, weights))
    }
}

/// Position-wise `Linear(d -> f) -> ReLU -> Linear(f -> d)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: LinearLayer,
    pub outer: LinearLayer,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: LinearLayer::new(store, &format!("{name}.inner"), d, ff, rng),
            outer: LinearLayer::new(store, &format!("{name}.outer"), ff, d, rng),
        }
    }

    pub fn param_count(d: usize, ff: usize) -> usize {
        LinearLayer::param_count(d, ff) + LinearLayer::param_count(ff, d)
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.apply(ctx, x)?.relu();
        self.outer.apply(ctx, h)
    }
}

/// Attention followed by add & norm on the query stream, then feed-forward
/// followed by add & norm. With `kv = query` this is a post-norm transformer
/// encoder layer; with another stream as `kv` it is a cross-modal encoder.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub ff_norm: LayerNorm,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), d, heads, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            feed_forward: FeedForward::new(store, &format!("{name}.feed_forward"), d, ff, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
        })
    }

    pub fn param_count(d: usize, ff: usize) -> usize {
        MultiHeadAttention::param_count(d) + FeedForward::param_count(d, ff) + 4 * d
    }

    /// `norm(query + dropout(attention(query, kv)))`.
    pub fn attention_sublayer<'t>(&self, ctx: &Ctx<'_, 't>, query: Var<'t>, kv: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let a = self.attention.forward(ctx, query, kv, mask)?;
        let a = ctx.apply_dropout(a)?;
        self.attn_norm.apply(ctx, query.add(a)?)
    }

    /// `norm(x + dropout(feed_forward(x)))`.
    pub fn feed_forward_sublayer<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.feed_forward.apply(ctx, x)?;
        let f = ctx.apply_dropout(f)?;
        self.ff_norm.apply(ctx, x.add(f)?)
    }

    /// `key_valid` marks usable `kv` rows.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, query: Var<'t>, kv: Var<'t>, key_valid: &[bool]) -> Result<Var<'t>> {
        let (q_len, _) = query.dims2();
        let mask = key_mask(q_len, key_valid);
        let x = self.attention_sublayer(ctx, query, kv, Some(&mask))?;
        self.feed_forward_sublayer(ctx, x)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    pub block: AttentionBlock,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            block: AttentionBlock::new(store, name, d, heads, ff, rng)?,
        })
    }

    pub fn param_count(d: usize, ff: usize) -> usize {
        AttentionBlock::param_count(d, ff)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>, valid: &[bool]) -> Result<Var<'t>> {
        self.block.forward(ctx, x, x, valid)
    }
}

/// Causal self-attention, cross-attention to a memory, and feed-forward,
/// each followed by residual add & norm.
#[derive(Debug, Clone)]
pub struct TransformerDecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross: AttentionBlock,
}

impl TransformerDecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attention"), d, heads, rng)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            cross: AttentionBlock::new(store, &format!("{name}.cross"), d, heads, ff, rng)?,
        })
    }

    pub fn param_count(d: usize, ff: usize) -> usize {
        MultiHeadAttention::param_count(d) + 2 * d + AttentionBlock::param_count(d, ff)
    }

    pub fn self_attention_sublayer<'t>(&self, ctx: &Ctx<'_, 't>, tgt: Var<'t>, causal: bool) -> Result<Var<'t>> {
        let (t, _) = tgt.dims2();
        let keys = vec![true; t];
        let mask = if causal { causal_mask(&keys) } else { key_mask(t, &keys) };
        let a = self.self_attention.forward(ctx, tgt, tgt, Some(&mask))?;
        let a = ctx.apply_dropout(a)?;
        self.self_norm.apply(ctx, tgt.add(a)?)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, tgt: Var<'t>, memory: Var<'t>, causal: bool, memory_valid: &[bool]) -> Result<Var<'t>> {
        let (m, _) = memory.dims2();
        if m == 0 || memory_valid.len() != m || !memory_valid.iter().any(|&v| v) {
            return Err(Error::invalid("transformer-decoder", "empty memory"));
        }
        if tgt.dims2().0 == 0 {
            return Err(Error::invalid("transformer-decoder", "empty target"));
        }
        let x = self.self_attention_sublayer(ctx, tgt, causal)?;
        self.cross.forward(ctx, x, memory, memory_valid)
    }
}

/// Token table plus learned position table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub vocab: usize,
    pub max_len: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, max_len: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            tokens: store.add(format!("{name}.tokens"), xavier_uniform(rng, vocab, d)),
            positions: store.add(format!("{name}.positions"), xavier_uniform(rng, max_len, d)),
            vocab,
            max_len,
            d,
        }
    }

    pub fn param_count(vocab: usize, max_len: usize, d: usize) -> usize {
        (vocab + max_len) * d
    }

    /// Row `i` is `tokens[ids[i]] + positions[i]`.
    pub fn embed<'t>(&self, ctx: &Ctx<'_, 't>, ids: &[u32]) -> Result<Var<'t>> {
        if ids.is_empty() {
            return Err(Error::invalid("embed", "empty sequence"));
        }
        if ids.len() > self.max_len {
            return Err(Error::invalid(
                "embed",
                format!("sequence length {} exceeds max_len {}", ids.len(), self.max_len),
            ));
        }
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= self.vocab) {
            return Err(Error::invalid(
                "embed",
                format!("token id {id} at index {pos} out of range for vocabulary of {}", self.vocab),
            ));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = ctx.p(self.tokens).gather_rows(&idx)?;
        let pe = ctx.p(self.positions).gather_rows(&positions)?;
        te.add(pe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for p in 0..k {
                    out[i * c + j] += a[i * k + p] * b[p * c + j];
                }
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut store = ParamStore::new();
        let lin = LinearLayer::new(&mut store, "fc", 3, 3, &mut rng());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        *store.get_mut(lin.weight) = eye;
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let x = tape.leaf(&random(&mut rng(), 2, 3));
        assert_eq!(lin.apply(&ctx, x).unwrap().data(), x.data());

        store.get_mut(lin.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let zero = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert_eq!(lin.apply(&ctx, zero).unwrap().data(), vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(lin.apply(&ctx, tape.leaf(&Tensor::zeros(&[2, 4]))).is_err());
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let lin = LinearLayer::new(&mut store, "fc", 3, 2, &mut r);
        let x = random(&mut r, 2, 3);
        let expected = naive_matmul(x.data(), store.get(lin.weight).data(), 2, 3, 2);
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let got = lin.apply(&ctx, tape.leaf(&x)).unwrap().data();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut r).unwrap();
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let q = tape.leaf(&random(&mut r, 3, 8));
        let kv = tape.leaf(&random(&mut r, 1, 8));
        let out = mha.forward(&ctx, q, kv, None).unwrap().data();
        let v = mha.value.apply(&ctx, kv).unwrap();
        let expected = mha.output.apply(&ctx, v).unwrap().data();
        for row in out.chunks(8) {
            for (a, b) in row.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_masked_keys_zero() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", 8, 4, &mut r).unwrap();
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let q = tape.leaf(&random(&mut r, 2, 8));
        let row = random(&mut r, 1, 8);
        let kv = Var::concat(&[tape.leaf(&row), tape.leaf(&row), tape.leaf(&row), tape.leaf(&row)], 0).unwrap();
        let mask = key_mask(2, &[true, true, false, true]);
        let (_, weights) = mha.forward_with_weights(&ctx, q, kv, Some(&mask)).unwrap();
        for w in weights {
            for row in w.data().chunks(4) {
                assert_eq!(row[2], 0.0);
                for &j in &[0, 1, 3] {
                    assert!((row[j] - 1.0 / 3.0).abs() < 1e-12);
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let all_masked = key_mask(2, &[false; 4]);
        assert!(mha.forward(&ctx, q, kv, Some(&all_masked)).is_err());
    }

    /// Unbatched per-head loop with block-diagonal single-head projections.
    #[test]
    fn multi_head_matches_per_head_reference() {
        let (d, heads, dh) = (8, 2, 4);
        let mut r = rng();
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", d, heads, &mut r).unwrap();
        let qx = random(&mut r, 3, d);
        let kvx = random(&mut r, 5, d);
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let got = mha.forward(&ctx, tape.leaf(&qx), tape.leaf(&kvx), None).unwrap().data();

        let w = |id: ParamId| store.get(id).data().to_vec();
        let (wq, bq, wk, wv, bv, wo, bo) = (
            w(mha.query.weight),
            w(mha.query.bias),
            w(mha.key),
            w(mha.value.weight),
            w(mha.value.bias),
            w(mha.output.weight),
            w(mha.output.bias),
        );
        let mut concat = vec![0.0; 3 * d];
        for h in 0..heads {
            // one single-head attention per head, using column block h of each projection
            let proj = |x: &[f64], rows: usize, wm: &[f64], b: Option<&[f64]>| -> Vec<Vec<f64>> {
                (0..rows)
                    .map(|i| {
                        (0..dh)
                            .map(|j| {
                                let col = h * dh + j;
                                let mut s = b.map_or(0.0, |b| b[col]);
                                for p in 0..d {
                                    s += x[i * d + p] * wm[p * d + col];
                                }
                                s
                            })
                            .collect()
                    })
                    .collect()
            };
            let q = proj(qx.data(), 3, &wq, Some(&bq));
            let k = proj(kvx.data(), 5, &wk, None);
            let v = proj(kvx.data(), 5, &wv, Some(&bv));
            for i in 0..3 {
                let logits: Vec<f64> = (0..5)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for j in 0..5 {
                    let a = (logits[j] - max).exp() / z;
                    for c in 0..dh {
                        concat[i * d + h * dh + c] += a * v[j][c];
                    }
                }
            }
        }
        let mut expected = naive_matmul(&concat, &wo, 3, d, d);
        for i in 0..3 {
            for j in 0..d {
                expected[i * d + j] += bo[j];
            }
        }
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn embedding_structure_and_bounds() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 10, 4, 3, &mut r);
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let out = emb.embed(&ctx, &[7, 2, 7]).unwrap().data();
        let pe = store.get(emb.positions).data();
        for c in 0..3 {
            let diff = out[c] - out[6 + c];
            assert!((diff - (pe[c] - pe[6 + c])).abs() < 1e-15);
        }
        assert!(emb.embed(&ctx, &[1, 2, 3, 4]).is_ok());
        assert!(emb.embed(&ctx, &[1, 2, 3, 4, 5]).is_err());
        let msg = emb.embed(&ctx, &[1, 10]).unwrap_err().to_string();
        assert!(msg.contains("index 1"), "{msg}");

        let mut zero = ParamStore::new();
        let emb = EmbeddingTable::new(&mut zero, "emb", 10, 4, 3, &mut r);
        for i in 0..zero.len() {
            zero.tensor_by_index_mut(i).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let params = zero.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        assert!(emb.embed(&ctx, &[3, 4]).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_layer_is_causal_and_matches_composition() {
        let (d, t) = (8, 4);
        let mut r = rng();
        let mut store = ParamStore::new();
        let dec = TransformerDecoderLayer::new(&mut store, "dec", d, 2, 16, &mut r).unwrap();
        let tgt = random(&mut r, t, d);
        let mem = random(&mut r, 5, d);
        let mut altered = tgt.clone();
        for v in &mut altered.data_mut()[2 * d..] {
            *v += 1.0;
        }
        let valid = [true, true, true, false, true];
        let tape = Tape::new();
        let params = store.bind(&tape, |_| true);
        let ctx = Ctx::eval(&tape, &params);
        let m = tape.leaf(&mem);
        let a = dec.forward(&ctx, tape.leaf(&tgt), m, true, &valid).unwrap().data();
        let b = dec.forward(&ctx, tape.leaf(&altered), m, true, &valid).unwrap().data();
        assert_eq!(a[..2 * d], b[..2 * d]);
        assert_ne!(a[2 * d..], b[2 * d..]);

        let x = dec.self_attention_sublayer(&ctx, tape.leaf(&tgt), true).unwrap();
        let mask = key_mask(t, &valid);
        let x = dec.cross.attention_sublayer(&ctx, x, m, Some(&mask)).unwrap();
        let composed = dec.cross.feed_forward_sublayer(&ctx, x).unwrap().data();
        assert_eq!(a, composed);

        let one = dec.forward(&ctx, tape.leaf(&random(&mut r, 1, d)), m, true, &valid).unwrap();
        assert_eq!(one.shape(), vec![1, d]);
        assert!(dec.forward(&ctx, tape.leaf(&tgt), m, true, &[false; 5]).is_err());
    }

    #[test]
    fn parameter_counts_match_formulas() {
        let (d, ff, heads) = (16, 24, 4);
        let mut r = rng();
        let mut store = ParamStore::new();
        MultiHeadAttention::new(&mut store, "mha", d, heads, &mut r).unwrap();
        assert_eq!(store.count_with_prefix("mha."), MultiHeadAttention::param_count(d));
        TransformerEncoderLayer::new(&mut store, "enc", d, heads, ff, &mut r).unwrap();
        assert_eq!(store.count_with_prefix("enc."), TransformerEncoderLayer::param_count(d, ff));
        TransformerDecoderLayer::new(&mut store, "dec", d, heads, ff, &mut r).unwrap();
        assert_eq!(store.count_with_prefix("dec."), TransformerDecoderLayer::param_count(d, ff));
        EmbeddingTable::new(&mut store, "emb", 30, 12, d, &mut r);
        assert_eq!(store.count_with_prefix("emb."), EmbeddingTable::param_count(30, 12, d));
        assert!(MultiHeadAttention::new(&mut store, "bad", 10, 4, &mut r).is_err());
    }

    #[test]
    fn outputs_finite_across_seeds() {
        for seed in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let enc = TransformerEncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut r).unwrap();
            let tape = Tape::new();
            let params = store.bind(&tape, |_| true);
            let ctx = Ctx::eval(&tape, &params);
            let x = tape.leaf(&random(&mut r, 5, 8));
            let y = enc.forward(&ctx, x, &[true, true, true, true, false]).unwrap();
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }
}
