//! Attention pooling, modality gating and the answer classifier.

mod heads;

pub use heads::{fusion_heads, ConcatGate, FusionCtor, FusionHead, MutanCore, MutanGate};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, Var};

/// Widths and rates of the fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d: usize,
    /// Hidden widths of the concat gate MLP.
    pub gate_hidden: [usize; 2],
    pub gate_dropout: f64,
    pub pool_dropout: f64,
    pub mutan_rank: usize,
    pub mutan_dim: usize,
    pub answers: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mutan_rank == 0 {
            return Err(Error::Config("MUTAN rank must be at least 1".into()));
        }
        if self.answers == 0 {
            return Err(Error::Config("answer vocabulary is empty".into()));
        }
        for rate in [self.gate_dropout, self.pool_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Reduces `[b×k×d]` to `[b×d]` with softmax-normalised learned scores
/// from a two-layer MLP.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPool {
    pub hidden: Linear,
    pub score: Linear,
    pub dropout: f64,
}

impl AttentionPool {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, init, &format!("{name}.mlp.0"), d, d)?,
            score: Linear::new(store, init, &format!("{name}.mlp.1"), d, 1)?,
            dropout,
        })
    }

    /// Returns the pooled rows `[b×d]` and the weights `[b×k]`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        z: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let shape = s.graph.shape(z).to_vec();
        let [b, k, d] = shape[..] else {
            return Err(Error::dim("attention_pool", &shape, &[]));
        };
        let h = self.hidden.forward(s, z)?;
        let h = s.graph.relu(h);
        let h = s.dropout(h, self.dropout)?;
        let scores = self.score.forward(s, h)?;
        let scores = s.graph.reshape(scores, &[b, k])?;
        let weights = s.graph.softmax(scores, mask)?;
        let w3 = s.graph.reshape(weights, &[b, 1, k])?;
        let pooled = s.graph.bmm(w3, z, false)?;
        Ok((s.graph.reshape(pooled, &[b, d])?, weights))
    }
}

/// `σ(out(LN(w_x·proj_x(x′) + w_y·proj_y(y′))))`, one independent
/// probability per answer.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub proj_x: Linear,
    pub proj_y: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl Classifier {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        d: usize,
        fused: usize,
        answers: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj_x: Linear::new(store, init, &format!("{name}.proj_x"), d, fused)?,
            proj_y: Linear::new(store, init, &format!("{name}.proj_y"), d, fused)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), fused)?,
            out: Linear::new(store, init, &format!("{name}.out"), fused, answers)?,
        })
    }

    /// Weighted sum of the projected modalities before normalisation.
    pub fn fuse<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var, weights: Var) -> Result<Var> {
        let wx = s.graph.slice_last(weights, 0, 1)?;
        let wy = s.graph.slice_last(weights, 1, 1)?;
        let px = self.proj_x.forward(s, x)?;
        let py = self.proj_y.forward(s, y)?;
        let a = s.graph.mul_rows(px, wx)?;
        let b = s.graph.mul_rows(py, wy)?;
        s.graph.add(a, b)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, y: Var, weights: Var) -> Result<Var> {
        let fused = self.fuse(s, x, y, weights)?;
        let h = self.norm.forward(s, fused)?;
        let logits = self.out.forward(s, h)?;
        Ok(s.graph.sigmoid(logits))
    }
}

/// Mean binary cross-entropy of `probs` against `target`.
pub fn bce_loss<T: Scalar>(s: &mut Session<'_, T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    s.graph.bce(probs, target)
}
