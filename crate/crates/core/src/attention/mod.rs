//! The attention tower: multi-head scaled dot-product attention, the
//! attention-on-attention block, self/guided units and the cascaded
//! encoder-decoder.
//!
//! Sequences are `[batch × length × d]`. Padding is expressed as an
//! additive key mask of shape `[batch × length]` holding `0` for real
//! positions and [`MASK_NEG`] for padding.

mod block;
mod unit;

pub use block::{output_blocks, AoaBlock, BlockCtor, OutputBlock, PlainBlock};
pub use unit::{EncoderDecoder, Unit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, Var, MASK_NEG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub layers: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("cascade depth L must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Additive key mask `[batch × max_len]` from true lengths.
pub fn key_mask<T: Scalar>(lengths: &[usize], max_len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[lengths.len(), max_len]);
    for (b, &len) in lengths.iter().enumerate() {
        for v in &mut m.data_mut()[b * max_len + len.min(max_len)..(b + 1) * max_len] {
            *v = T::lit(MASK_NEG);
        }
    }
    m
}

/// `softmax(Q·Kᵀ/√dh + mask)·V` over `[G×q×dh]`, `[G×k×dh]`, `[G×k×dh]`.
///
/// `mask` follows [`crate::Graph::softmax`] broadcasting: its rows cover
/// contiguous blocks of the `G·q` score rows. Returns the output and the
/// attention probabilities `[G×q×k]`.
pub fn scaled_dot_attention<T: Scalar>(
    s: &mut Session<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let dh = s.graph.value(q).last_dim();
    if s.graph.value(k).last_dim() != dh || s.graph.shape(k) != s.graph.shape(v) {
        return Err(Error::dim("attention", s.graph.shape(k), s.graph.shape(v)));
    }
    let scores = s.graph.bmm(q, k, true)?;
    let scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = s.graph.softmax(scores, mask)?;
    let out = s.graph.bmm(probs, v, false)?;
    Ok((out, probs))
}

/// Per-head query/key/value projections with an output projection.
#[derive(Clone, Copy, Debug)]
pub struct MultiHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.query"), d, d)?,
            key: Linear::new(store, init, &format!("{name}.key"), d, d)?,
            value: Linear::new(store, init, &format!("{name}.value"), d, d)?,
            output: Linear::new(store, init, &format!("{name}.output"), d, d)?,
            heads: cfg.heads,
        })
    }

    /// Attends `xq: [b×q×d]` over `xkv: [b×k×d]`; `key_mask` is `[b×k]`.
    /// Returns `[b×q×d]` and the per-head probabilities `[(b·h)×q×k]`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        xq: Var,
        xkv: Var,
        key_mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(s, xq)?;
        let k = self.key.forward(s, xkv)?;
        let v = self.value.forward(s, xkv)?;
        let q = s.graph.split_heads(q, self.heads)?;
        let k = s.graph.split_heads(k, self.heads)?;
        let v = s.graph.split_heads(v, self.heads)?;
        let (att, probs) = scaled_dot_attention(s, q, k, v, key_mask)?;
        let merged = s.graph.merge_heads(att, self.heads)?;
        Ok((self.output.forward(s, merged)?, probs))
    }
}
