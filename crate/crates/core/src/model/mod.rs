//! The assembled network: image projection, question embedding + LSTM,
//! the encoder-decoder tower, attention pooling, modality gate and the
//! answer classifier, plus checkpoint persistence.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, MAGIC};
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{key_mask, output_blocks, EncoderDecoder};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fusion::{fusion_heads, AttentionPool, Classifier, FusionHead};
use crate::nn::{Embedding, Init, Linear, Lstm, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub input: Linear,
    pub embedding: Embedding,
    pub lstm: Lstm,
    pub tower: EncoderDecoder<T>,
    pub pool_image: AttentionPool,
    pub pool_question: AttentionPool,
    pub gate: Box<dyn FusionHead<T>>,
    pub classifier: Classifier,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Output {
    /// `[b×answers]` independent answer probabilities.
    pub probs: Var,
    /// `[b×2]` modality weights (image, question).
    pub modality: Var,
    pub pool_image: Var,
    pub pool_question: Var,
}

impl<T: Scalar> Model<T> {
    /// Builds and initialises every parameter from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone();
        config.precision = T::PRECISION;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let d = config.d;
        let input = Linear::new(&mut store, &mut init, "input", config.d_in, d)?;
        let embedding = Embedding::new(
            &mut store,
            &mut init,
            "embedding",
            config.question_vocab,
            config.embed_dim,
        )?;
        if config.freeze_embeddings {
            store.get_mut(embedding.table).trainable = false;
        }
        let lstm = Lstm::new(&mut store, &mut init, "lstm", config.embed_dim, d)?;
        let block = output_blocks::<T>().get(&config.block)?;
        let tower = EncoderDecoder::new(&mut store, &mut init, &config.attention(), block)?;
        let pool_image = AttentionPool::new(&mut store, &mut init, "pool.image", d, config.pool_dropout)?;
        let pool_question =
            AttentionPool::new(&mut store, &mut init, "pool.question", d, config.pool_dropout)?;
        let fcfg = config.fusion_config();
        let gate = fusion_heads::<T>().get(&config.fusion)?(&mut store, &mut init, &fcfg)?;
        let classifier = Classifier::new(&mut store, &mut init, "classifier", d, d, config.answer_vocab)?;
        Ok(Self {
            config,
            store,
            input,
            embedding,
            lstm,
            tower,
            pool_image,
            pool_question,
            gate,
            classifier,
        })
    }

    /// Embeds and encodes one question: `[n×d]` with `n = min(len, 14)`.
    pub fn question_pipeline(&self, s: &mut Session<'_, T>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty question".into()));
        }
        let n = tokens.len().min(self.config.max_question_len);
        let y = self.encode_tokens(s, &tokens[..n], 1, n)?;
        s.graph.reshape(y, &[n, self.config.d])
    }

    fn encode_tokens(&self, s: &mut Session<'_, T>, ids: &[usize], b: usize, n: usize) -> Result<Var> {
        let emb = self.embedding.forward(s, ids)?;
        let emb = s.graph.reshape(emb, &[b, n, self.config.embed_dim])?;
        self.lstm.forward(s, emb)
    }

    /// Full forward pass over a padded batch. The question axis is cut to
    /// the longest question in the batch.
    pub fn forward(&self, s: &mut Session<'_, T>, batch: &Batch) -> Result<Output> {
        if batch.d_in() != self.config.d_in {
            return Err(Error::dim("model input", &[batch.d_in()], &[self.config.d_in]));
        }
        let b = batch.len();
        let m = batch.m_max();
        let width = batch.tokens.len() / b.max(1);
        let lens: Vec<usize> = batch
            .token_lens
            .iter()
            .map(|&l| l.min(self.config.max_question_len))
            .collect();
        let n = lens.iter().copied().max().unwrap_or(0);
        if n == 0 {
            return Err(Error::Contract("empty question".into()));
        }
        let ids: Vec<usize> = (0..b)
            .flat_map(|i| batch.tokens[i * width..i * width + n].iter().copied())
            .collect();

        let image = s.input(batch.image.cast());
        let x = self.input.forward(s, image)?;
        let y = self.encode_tokens(s, &ids, b, n)?;
        let mask_x = key_mask::<T>(&batch.object_counts, m);
        let mask_y = key_mask::<T>(&lens, n);
        let (x, y) = self.tower.forward(s, x, y, Some(&mask_x), Some(&mask_y))?;
        let (xp, wx) = self.pool_image.forward(s, x, Some(&mask_x))?;
        let (yp, wy) = self.pool_question.forward(s, y, Some(&mask_y))?;
        s.record(|| "pool.image".into(), wx);
        s.record(|| "pool.question".into(), wy);
        let modality = self.gate.modality_weights(s, xp, yp)?;
        s.record(|| "modality".into(), modality);
        let probs = self.classifier.forward(s, xp, yp, modality)?;
        Ok(Output {
            probs,
            modality,
            pool_image: wx,
            pool_question: wy,
        })
    }

    /// Eval-mode probabilities `[b×answers]`.
    pub fn probabilities(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, batch)?;
        Ok(s.value(out.probs).clone())
    }

    /// Eval-mode predicted answer index per sample.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<usize>> {
        let probs = self.probabilities(batch)?;
        Ok(probs
            .data()
            .chunks(self.config.answer_vocab)
            .map(predict)
            .collect())
    }

    /// Zeroes gradient components that must not move: the padding row of
    /// the embedding table.
    pub fn constrain_grads(&self, grads: &mut [Tensor<T>]) {
        let g = &mut grads[self.embedding.table.index()];
        let dim = self.embedding.dim;
        for v in &mut g.data_mut()[..dim] {
            *v = T::zero();
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::build(&self.config)?;
        out.store = self.store.cast();
        Ok(out)
    }
}

/// Index of the largest probability; the lowest index wins ties.
pub fn predict<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_batch, generate_dataset, GeneratorSpec, QaSample};
    use crate::nn::Mode;

    fn desk_census(c: &ModelConfig) -> usize {
        let (d, e) = (c.d, c.embed_dim);
        let linear = |i: usize, o: usize| i * o + o;
        let unit = 4 * linear(d, d) + (4 * d * d + 2 * d) + linear(d, 4 * d) + linear(4 * d, d) + 4 * d;
        let pool = linear(d, d) + linear(d, 1);
        let gate = linear(2 * d, c.gate_hidden[0])
            + linear(c.gate_hidden[0], c.gate_hidden[1])
            + linear(c.gate_hidden[1], 2);
        let clf = 2 * linear(d, d) + 2 * d + linear(d, c.answer_vocab);
        linear(c.d_in, d)
            + c.question_vocab * e
            + (e * 4 * d + d * 4 * d + 4 * d)
            + 3 * c.layers * unit
            + 2 * pool
            + gate
            + clf
    }

    #[test]
    fn desk_parameter_census() {
        let c = ModelConfig::desk();
        let m = Model::<f32>::build(&c).unwrap();
        assert_eq!(m.num_params(), desk_census(&c));
        let mutan = ModelConfig {
            fusion: "mutan".into(),
            ..c.clone()
        };
        let m = Model::<f32>::build(&mutan).unwrap();
        let expected = desk_census(&c)
            - (2 * c.d * c.gate_hidden[0] + c.gate_hidden[0])
            - (c.gate_hidden[0] * c.gate_hidden[1] + c.gate_hidden[1])
            - (c.gate_hidden[1] * 2 + 2)
            + 2 * c.mutan_rank * c.d * c.mutan_dim
            + (c.mutan_dim * 2 + 2);
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
        let b = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let names: std::collections::HashSet<_> = a.store.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names.len(), a.store.len());
    }

    #[test]
    fn question_pipeline_trims_and_rejects_empty() {
        let m = Model::<f64>::build(&ModelConfig::tiny()).unwrap();
        let mut s = Session::eval(&m.store);
        let y = m.question_pipeline(&mut s, &[3; 20]).unwrap();
        assert_eq!(s.graph.shape(y), &[14, 8]);
        let y = m.question_pipeline(&mut s, &[2]).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 8]);
        assert!(matches!(
            m.question_pipeline(&mut s, &[]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            m.question_pipeline(&mut s, &[99]),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn predict_ties_take_lowest_index() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.5, 0.5]), 0);
        assert_eq!(predict(&[0.2, 0.7, 0.7]), 1);
    }

    fn toy_batch() -> (ModelConfig, Vec<QaSample>, crate::data::Vocab, crate::data::Vocab) {
        let g = generate_dataset(6, 2, &GeneratorSpec::default(), 4).unwrap();
        let c = ModelConfig {
            d_in: 22,
            question_vocab: g.question_vocab.len(),
            answer_vocab: g.answer_vocab.len(),
            ..ModelConfig::tiny()
        };
        (c, g.samples, g.question_vocab, g.answer_vocab)
    }

    #[test]
    fn probabilities_in_open_interval_and_padding_invariant() {
        let (c, samples, q, a) = toy_batch();
        let m = Model::<f64>::build(&c).unwrap();
        let refs: Vec<&QaSample> = samples.iter().collect();
        let batch = encode_batch(&refs, &q, &a).unwrap();
        let probs = m.probabilities(&batch).unwrap();
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        for (i, s) in samples.iter().enumerate() {
            let alone = encode_batch(&[s], &q, &a).unwrap();
            let p = m.probabilities(&alone).unwrap();
            let row = &probs.data()[i * c.answer_vocab..(i + 1) * c.answer_vocab];
            for (x, y) in row.iter().zip(p.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_differs_only_with_dropout() {
        let (c, samples, q, a) = toy_batch();
        let refs: Vec<&QaSample> = samples.iter().collect();
        let batch = encode_batch(&refs, &q, &a).unwrap();
        let m = Model::<f64>::build(&c).unwrap();
        let mut s = Session::new(&m.store, Mode::Train, 3);
        let out = m.forward(&mut s, &batch).unwrap();
        assert_eq!(s.value(out.probs), &m.probabilities(&batch).unwrap());
        let m = Model::<f64>::build(&ModelConfig { dropout: 0.1, ..c }).unwrap();
        let mut s = Session::new(&m.store, Mode::Train, 3);
        let out = m.forward(&mut s, &batch).unwrap();
        assert_ne!(s.value(out.probs), &m.probabilities(&batch).unwrap());
    }
}
