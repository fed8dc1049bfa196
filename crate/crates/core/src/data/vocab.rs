use std::collections::HashMap;

use super::QaSample;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index table. Question vocabularies reserve `PAD` and `UNK`;
/// answer vocabularies reserve nothing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    has_unk: bool,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let has_unk = tokens.get(UNK).is_some_and(|t| t == UNK_TOKEN);
        Self {
            tokens,
            index,
            has_unk,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `UNK` for question vocabularies.
    pub fn encode(&self, token: &str) -> Option<usize> {
        self.get(token).or(self.has_unk.then_some(UNK))
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }
}

fn ranked<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for t in items {
        *freq.entry(t).or_default() += 1;
    }
    let mut v: Vec<(&str, usize)> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Builds `(question_vocab, answer_vocab)`, ranking tokens by descending
/// frequency and breaking ties lexicographically.
pub fn build_vocab(samples: &[QaSample]) -> (Vocab, Vocab) {
    let mut q = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    q.extend(
        ranked(samples.iter().flat_map(|s| s.question.iter().map(String::as_str)))
            .into_iter()
            .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN),
    );
    let a = ranked(samples.iter().map(|s| s.answer.as_str()));
    (Vocab::from_tokens(q), Vocab::from_tokens(a))
}
