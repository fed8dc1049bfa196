use super::vocab::{Vocab, PAD};
use super::{Category, QaSample, MAX_QUESTION_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padded model inputs for `b` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b×m_max×d_in]`, zero rows past each sample's object count.
    pub image: Tensor<f64>,
    pub object_counts: Vec<usize>,
    /// Row-major `[b×MAX_QUESTION_LEN]` token indices, `PAD` past each
    /// question's length.
    pub tokens: Vec<usize>,
    pub token_lens: Vec<usize>,
    /// `[b×answers]` one-hot rows, or soft scores where supplied.
    pub targets: Tensor<f64>,
    pub answers: Vec<Option<usize>>,
    pub categories: Vec<Category>,
    pub scene_ids: Vec<usize>,
    pub soft: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.object_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_counts.is_empty()
    }

    pub fn m_max(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.image.shape()[2]
    }

    /// `true` for real objects, row-major `[b×m_max]`.
    pub fn object_mask(&self) -> Vec<bool> {
        lengths_mask(&self.object_counts, self.m_max())
    }

    /// `true` for real tokens, row-major `[b×MAX_QUESTION_LEN]`.
    pub fn token_mask(&self) -> Vec<bool> {
        lengths_mask(&self.token_lens, MAX_QUESTION_LEN)
    }
}

fn lengths_mask(lens: &[usize], max: usize) -> Vec<bool> {
    lens.iter().flat_map(|&l| (0..max).map(move |j| j < l)).collect()
}

/// Pads `samples` into one batch: objects to the largest object count in
/// the batch, questions (trimmed to the first `MAX_QUESTION_LEN` tokens)
/// to `MAX_QUESTION_LEN`.
pub fn encode_batch(samples: &[&QaSample], questions: &Vocab, answers: &Vocab) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Contract("batch needs at least one sample".into()));
    }
    let d_in = samples[0].features.first().map_or(0, Vec::len);
    let mut m_max = 0;
    for s in samples {
        if s.features.is_empty() {
            return Err(Error::Contract(format!(
                "sample of scene {} has no objects",
                s.scene_id
            )));
        }
        if s.question.is_empty() {
            return Err(Error::Contract(format!(
                "sample of scene {} has an empty question",
                s.scene_id
            )));
        }
        if let Some(f) = s.features.iter().find(|f| f.len() != d_in) {
            return Err(Error::dim("encode_batch", &[f.len()], &[d_in]));
        }
        m_max = m_max.max(s.features.len());
    }
    let b = samples.len();
    let v = answers.len();
    let mut image = vec![0.0; b * m_max * d_in];
    let mut tokens = vec![PAD; b * MAX_QUESTION_LEN];
    let mut targets = vec![0.0; b * v];
    let mut out = Batch {
        image: Tensor::zeros(&[0]),
        object_counts: Vec::with_capacity(b),
        tokens: Vec::new(),
        token_lens: Vec::with_capacity(b),
        targets: Tensor::zeros(&[0]),
        answers: Vec::with_capacity(b),
        categories: Vec::with_capacity(b),
        scene_ids: Vec::with_capacity(b),
        soft: Vec::with_capacity(b),
    };
    for (i, s) in samples.iter().enumerate() {
        for (j, f) in s.features.iter().enumerate() {
            image[(i * m_max + j) * d_in..][..d_in].copy_from_slice(f);
        }
        let q = &s.question[..s.question.len().min(MAX_QUESTION_LEN)];
        for (j, t) in q.iter().enumerate() {
            tokens[i * MAX_QUESTION_LEN + j] = questions.encode(t).unwrap_or(PAD);
        }
        let answer = answers.get(&s.answer);
        let row = &mut targets[i * v..(i + 1) * v];
        match &s.soft {
            Some(scores) if scores.len() == v => row.copy_from_slice(scores),
            Some(scores) => return Err(Error::dim("soft targets", &[scores.len()], &[v])),
            None => {
                if let Some(a) = answer {
                    row[a] = 1.0;
                }
            }
        }
        out.object_counts.push(s.features.len());
        out.token_lens.push(q.len());
        out.answers.push(answer);
        out.categories.push(s.category);
        out.scene_ids.push(s.scene_id);
        out.soft.push(s.soft.is_some());
    }
    out.image = Tensor::new(&[b, m_max, d_in], image)?;
    out.tokens = tokens;
    out.targets = Tensor::new(&[b, v], targets)?;
    Ok(out)
}

/// Inverse of [`encode_batch`] for samples whose tokens and answers are in
/// the vocabularies.
pub fn decode_batch(batch: &Batch, questions: &Vocab, answers: &Vocab) -> Vec<QaSample> {
    let (m_max, d_in, v) = (batch.m_max(), batch.d_in(), answers.len());
    (0..batch.len())
        .map(|i| {
            let features = (0..batch.object_counts[i])
                .map(|j| batch.image.data()[(i * m_max + j) * d_in..][..d_in].to_vec())
                .collect();
            let question = batch.tokens[i * MAX_QUESTION_LEN..][..batch.token_lens[i]]
                .iter()
                .map(|&t| questions.token(t).unwrap_or_default().to_string())
                .collect();
            let answer = batch.answers[i]
                .and_then(|a| answers.token(a))
                .unwrap_or_default()
                .to_string();
            let soft = batch.soft[i].then(|| batch.targets.data()[i * v..(i + 1) * v].to_vec());
            QaSample {
                scene_id: batch.scene_ids[i],
                features,
                question,
                answer,
                category: batch.categories[i],
                soft,
            }
        })
        .collect()
}
