//! Embeddings, the masked encoder stack and the tied output head, written
//! against a [`Graph`] so the same code serves training and inference.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::params::{self, part, BoundParams};
use crate::model::ModelConfig;
use crate::numeric::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::textcodec::Batch;

/// Dropout source for a forward pass.
pub enum Noise<'a> {
    Off,
    On(&'a mut ChaCha8Rng),
}

impl Noise<'_> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Var {
        match self {
            Noise::Off => x,
            Noise::On(rng) => g.dropout(x, rate, *rng),
        }
    }
}

/// Attention weights per layer, each `[B, heads, T, T]`.
pub type AttentionMaps<T> = Vec<Tensor<T>>;

fn check_batch(batch: &Batch, cfg: &ModelConfig) -> Result<()> {
    if batch.n == 0 || batch.size() == 0 {
        return Err(Error::EmptyInput("batch".into()));
    }
    if batch.n > cfg.max_len {
        return Err(Error::TooLong {
            len: batch.n,
            max_len: cfg.max_len,
        });
    }
    Ok(())
}

fn segment_rows<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, batch: &Batch, segment: usize) -> Result<Var> {
    g.gather(p.at(params::SEGMENT), &vec![segment; batch.size() * batch.n])
}

/// `E[char] + pos + seg0`, shaped `[B, n, d]`.
pub fn embed_text<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    check_batch(batch, cfg)?;
    let words = g.gather(p.at(params::WORD), &batch.char_ids)?;
    let pos = g.gather(p.at(params::POSITION), &batch.half_positions())?;
    let seg = segment_rows(g, p, batch, 0)?;
    let h = g.add(words, pos)?;
    let h = g.add(h, seg)?;
    g.reshape(h, &[batch.size(), batch.n, cfg.d_model])
}

/// `init + final + pos + seg1`, shaped `[B, n, d]`.
pub fn embed_pinyin<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    check_batch(batch, cfg)?;
    let initials = g.gather(p.at(params::INITIAL), &batch.initial_ids)?;
    let finals = g.gather(p.at(params::FINAL), &batch.final_ids)?;
    let pos = g.gather(p.at(params::POSITION), &batch.half_positions())?;
    let seg = segment_rows(g, p, batch, 1)?;
    let h = g.add(initials, finals)?;
    let h = g.add(h, pos)?;
    let h = g.add(h, seg)?;
    g.reshape(h, &[batch.size(), batch.n, cfg.d_model])
}

/// `H⁰` for the phonetics-aware sequence: text rows then pinyin rows,
/// `[B, 2n, d]`.
pub fn embed<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    let text = embed_text(g, p, cfg, batch)?;
    let pinyin = embed_pinyin(g, p, cfg, batch)?;
    g.concat(text, pinyin)
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w, false)?;
    g.add_bias(y, b)
}

/// `[B*T, d] -> [B, heads, T, d_head]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, b: usize, t: usize, cfg: &ModelConfig) -> Result<Var> {
    let x = g.reshape(x, &[b, t, cfg.heads, cfg.head_dim()])?;
    g.swap_middle(x)
}

/// Runs the encoder stack on `h0: [B, T, d]` under an additive mask
/// `[B, T, T]`. Attention weights are appended to `capture` when given.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    h0: Var,
    mask: &Tensor<T>,
    noise: &mut Noise<'_>,
    mut capture: Option<&mut AttentionMaps<T>>,
) -> Result<Var> {
    let &[b, t, d] = g.shape(h0) else {
        return Err(Error::shape("encode", g.shape(h0), &[cfg.d_model]));
    };
    if d != cfg.d_model || mask.shape() != [b, t, t] {
        return Err(Error::shape("encode", g.shape(h0), mask.shape()));
    }
    let scale = T::of(1.0 / (cfg.head_dim() as f64).sqrt());
    let h0 = noise.apply(g, h0, cfg.dropout);
    let mut h = g.reshape(h0, &[b * t, d])?;
    for l in 0..cfg.layers {
        let q = linear(g, h, p.layer(l, part::WQ), p.layer(l, part::BQ))?;
        let k = linear(g, h, p.layer(l, part::WK), p.layer(l, part::BK))?;
        let v = linear(g, h, p.layer(l, part::WV), p.layer(l, part::BV))?;
        let q = split_heads(g, q, b, t, cfg)?;
        let k = split_heads(g, k, b, t, cfg)?;
        let v = split_heads(g, v, b, t, cfg)?;

        let scores = g.matmul(q, k, true)?;
        let scores = g.scale(scores, scale);
        let weights = g.masked_softmax(scores, Some(mask))?;
        if let Some(maps) = capture.as_deref_mut() {
            maps.push(g.value(weights).clone());
        }
        let ctx = g.matmul(weights, v, false)?;
        let ctx = g.swap_middle(ctx)?;
        let ctx = g.reshape(ctx, &[b * t, d])?;

        let attn = linear(g, ctx, p.layer(l, part::WO), p.layer(l, part::BO))?;
        let attn = noise.apply(g, attn, cfg.dropout);
        let res = g.add(h, attn)?;
        h = g.layer_norm(res, p.layer(l, part::LN1_G), p.layer(l, part::LN1_B))?;

        let inner = linear(g, h, p.layer(l, part::W1), p.layer(l, part::B1))?;
        let inner = g.gelu(inner);
        let out = linear(g, inner, p.layer(l, part::W2), p.layer(l, part::B2))?;
        let out = noise.apply(g, out, cfg.dropout);
        let res = g.add(h, out)?;
        h = g.layer_norm(res, p.layer(l, part::LN2_G), p.layer(l, part::LN2_B))?;
    }
    g.reshape(h, &[b, t, d])
}

/// `h · Eᵀ + b` over the last dimension of `h`, returning `[rows, |V|]`.
pub fn predict_logits<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, h: Var) -> Result<Var> {
    let d = *g.shape(h).last().unwrap_or(&0);
    if d != cfg.d_model {
        return Err(Error::shape("predict_logits", g.shape(h), &[cfg.d_model]));
    }
    let rows = g.value(h).len() / d;
    let flat = g.reshape(h, &[rows, d])?;
    let logits = g.matmul(flat, p.at(params::WORD), true)?;
    g.add_bias(logits, p.at(params::output_bias_index(cfg)))
}

/// Output of the phonetics-aware pass.
pub struct PhoneticsOutput {
    /// `[B*n, |V|]`
    pub text_logits: Var,
    /// `[B*n, |V|]`
    pub pinyin_logits: Var,
    /// `[B, 2n, d]`
    pub hidden: Var,
}

/// One encoder pass over the text-plus-pinyin sequence.
pub fn forward_phonetics<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    noise: &mut Noise<'_>,
    capture: Option<&mut AttentionMaps<T>>,
) -> Result<PhoneticsOutput> {
    let h0 = embed(g, p, cfg, batch)?;
    let hidden = encode(g, p, cfg, h0, &batch.phonetic_mask(), noise, capture)?;
    let text = g.narrow(hidden, 0, batch.n)?;
    let pinyin = g.narrow(hidden, batch.n, batch.n)?;
    Ok(PhoneticsOutput {
        text_logits: predict_logits(g, p, cfg, text)?,
        pinyin_logits: predict_logits(g, p, cfg, pinyin)?,
        hidden,
    })
}

/// Encoder pass over the characters alone; returns `[B*n, |V|]` logits.
pub fn forward_raw<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    noise: &mut Noise<'_>,
) -> Result<Var> {
    let h0 = embed_text(g, p, cfg, batch)?;
    let hidden = encode(g, p, cfg, h0, &batch.half_mask(), noise, None)?;
    predict_logits(g, p, cfg, hidden)
}

/// Encoder pass over the pinyin slots alone (segment 1, shared positions,
/// padding-only mask); returns hidden states `[B, n, d]`.
pub fn encode_pinyin_only<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
    noise: &mut Noise<'_>,
) -> Result<Var> {
    let h0 = embed_pinyin(g, p, cfg, batch)?;
    encode(g, p, cfg, h0, &batch.half_mask(), noise, None)
}
