use serde::{Deserialize, Serialize};

use crate::attention::{output_blocks, AttentionConfig};
use crate::data::MAX_QUESTION_LEN;
use crate::error::{Error, Result};
use crate::fusion::{fusion_heads, FusionConfig};
use crate::tensor::Precision;

/// Every architecture hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Cascade depth.
    #[serde(rename = "L")]
    pub layers: usize,
    pub embed_dim: usize,
    pub max_question_len: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
    /// Width of the incoming object features.
    pub d_in: usize,
    /// Dropout inside the attention units.
    pub dropout: f64,
    pub pool_dropout: f64,
    pub gate_dropout: f64,
    /// Attention output block: `aoa` or `plain`.
    pub block: String,
    /// Modality gate: `attention` or `mutan`.
    pub fusion: String,
    pub gate_hidden: [usize; 2],
    pub mutan_rank: usize,
    pub mutan_dim: usize,
    pub freeze_embeddings: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            d: 512,
            heads: 8,
            layers: 6,
            embed_dim: 300,
            max_question_len: MAX_QUESTION_LEN,
            question_vocab: 20_000,
            answer_vocab: 3129,
            d_in: 2048,
            dropout: 0.1,
            pool_dropout: 0.1,
            gate_dropout: 0.2,
            block: "aoa".into(),
            fusion: "attention".into(),
            gate_hidden: [1024, 512],
            mutan_rank: 8,
            mutan_dim: 512,
            freeze_embeddings: false,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            embed_dim: 32,
            question_vocab: 64,
            answer_vocab: 32,
            d_in: 22,
            gate_hidden: [128, 64],
            mutan_dim: 64,
            ..Self::paper()
        }
    }

    /// Smallest configuration exercising every component; used for
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            layers: 1,
            embed_dim: 6,
            question_vocab: 9,
            answer_vocab: 5,
            d_in: 7,
            dropout: 0.0,
            pool_dropout: 0.0,
            gate_dropout: 0.0,
            gate_hidden: [6, 4],
            mutan_rank: 2,
            mutan_dim: 4,
            precision: Precision::F64,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (known: paper, desk, tiny)"
            ))),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            heads: self.heads,
            dropout: self.dropout,
            layers: self.layers,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            d: self.d,
            gate_hidden: self.gate_hidden,
            gate_dropout: self.gate_dropout,
            pool_dropout: self.pool_dropout,
            mutan_rank: self.mutan_rank,
            mutan_dim: self.mutan_dim,
            answers: self.answer_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        self.fusion_config().validate()?;
        output_blocks::<f64>().get(&self.block)?;
        fusion_heads::<f64>().get(&self.fusion)?;
        let widths = [
            ("d", self.d),
            ("embed_dim", self.embed_dim),
            ("max_question_len", self.max_question_len),
            ("d_in", self.d_in),
            ("mutan_dim", self.mutan_dim),
            ("gate_hidden[0]", self.gate_hidden[0]),
            ("gate_hidden[1]", self.gate_hidden[1]),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_question_len > MAX_QUESTION_LEN {
            return Err(Error::Config(format!(
                "max_question_len {} exceeds the batch width {MAX_QUESTION_LEN}",
                self.max_question_len
            )));
        }
        if self.question_vocab < 2 {
            return Err(Error::Config("question vocabulary needs PAD and UNK".into()));
        }
        Ok(())
    }

    /// Field names whose values differ, ignoring the seed and precision.
    pub fn architecture_diff(&self, other: &Self) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serialises");
        let b = serde_json::to_value(other).expect("config serialises");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return Vec::new();
        };
        a.iter()
            .filter(|(k, v)| !matches!(k.as_str(), "seed" | "precision") && b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}
