//! Synthetic toy-VQA data: scenes of coloured shapes on a grid, templated
//! questions with exact answers, vocabularies, padded batches and the
//! JSON-lines dataset format.

mod batch;
mod generate;
mod io;
mod vocab;

pub use batch::{decode_batch, encode_batch, Batch};
pub use generate::{
    generate_dataset, generate_splits, recompute_answer, GeneratedDataset, GeneratorSpec, Scene, SceneObject,
    Splits,
};
pub use io::{parse_dataset, read_dataset, write_dataset, Dataset, Manifest, VocabLists};
pub use vocab::{build_vocab, Vocab, PAD, UNK};

use serde::{Deserialize, Serialize};

/// Maximum question length kept after trimming.
pub const MAX_QUESTION_LEN: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Other,
    YesNo,
    Number,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Other, Category::YesNo, Category::Number];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Other => "other",
            Category::YesNo => "yesno",
            Category::Number => "number",
        }
    }
}

/// One question about one scene, with its object features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub scene_id: usize,
    pub features: Vec<Vec<f64>>,
    pub question: Vec<String>,
    pub answer: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<Vec<f64>>,
}

/// 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
