use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{build_vocab, Vocab};
use super::QaSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabLists {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<VocabLists>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<QaSample>,
}

impl Dataset {
    pub fn new(d_in: usize, questions: &Vocab, answers: &Vocab, samples: Vec<QaSample>) -> Self {
        Self {
            manifest: Manifest {
                d_in,
                vocab: Some(VocabLists {
                    question: questions.tokens().to_vec(),
                    answer: answers.tokens().to_vec(),
                }),
            },
            samples,
        }
    }

    /// Vocabularies from the manifest, or built from the samples when the
    /// manifest carries none.
    pub fn vocabs(&self) -> (Vocab, Vocab) {
        match &self.manifest.vocab {
            Some(v) => (
                Vocab::from_tokens(v.question.clone()),
                Vocab::from_tokens(v.answer.clone()),
            ),
            None => build_vocab(&self.samples),
        }
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let json = |e: serde_json::Error| Error::Contract(e.to_string());
    serde_json::to_writer(&mut w, &ds.manifest).map_err(json)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s).map_err(json)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

/// Parses the JSON-lines text; line numbers in errors are 1-based and
/// count the manifest line.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing manifest line".into(),
    })?;
    let manifest: Manifest = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("manifest: {e}"),
    })?;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let s: QaSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(f) = s.features.iter().find(|f| f.len() != manifest.d_in) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("feature row of width {} but d_in is {}", f.len(), manifest.d_in),
            });
        }
        samples.push(s);
    }
    Ok(Dataset { manifest, samples })
}
