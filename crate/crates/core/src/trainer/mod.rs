//! Adam with the warm-up/step-decay schedule, the training loop and
//! per-category exact-match evaluation.

mod adam;
mod schedule;

pub use adam::{Adam, AdamConfig};
pub use schedule::Schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, Batch, Category, QaSample, Vocab};
use crate::error::{Error, Result};
use crate::model::{predict, save_checkpoint, Model};
use crate::nn::{Mode, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Encode the next batches on a helper thread.
    pub prefetch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            schedule: Schedule::paper(),
            adam: AdamConfig::default(),
            seed: 0,
            prefetch: true,
        }
    }

    /// Four warm-up epochs to a lower cap suited to the small model, then
    /// step decay over the last eight of 40 epochs.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            schedule: Schedule {
                warmup_rate: 7.5e-5,
                cap: 3e-4,
                decay_start: 32,
                decay_every: 4,
                decay_factor: 0.2,
                epochs: 40,
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Exact-match counts per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: [usize; 3],
    pub total: [usize; 3],
}

impl Tally {
    fn slot(c: Category) -> usize {
        match c {
            Category::Other => 0,
            Category::YesNo => 1,
            Category::Number => 2,
        }
    }

    pub fn add(&mut self, category: Category, correct: bool) {
        let k = Self::slot(category);
        self.total[k] += 1;
        self.correct[k] += usize::from(correct);
    }

    /// Percentage for one category, `None` if it has no samples.
    pub fn category(&self, c: Category) -> Option<f64> {
        let k = Self::slot(c);
        (self.total[k] > 0).then(|| 100.0 * self.correct[k] as f64 / self.total[k] as f64)
    }

    /// Sample-weighted percentage over every category.
    pub fn all(&self) -> Option<f64> {
        let total: usize = self.total.iter().sum();
        (total > 0).then(|| 100.0 * self.correct.iter().sum::<usize>() as f64 / total as f64)
    }

    pub fn accuracy(&self) -> Accuracy {
        Accuracy {
            all: self.all(),
            other: self.category(Category::Other),
            yesno: self.category(Category::YesNo),
            number: self.category(Category::Number),
        }
    }
}

/// Percent accuracies; absent categories are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub all: Option<f64>,
    pub other: Option<f64>,
    pub yesno: Option<f64>,
    pub number: Option<f64>,
}

/// One line of the metrics file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(flatten)]
    pub accuracy: Accuracy,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub tally: Tally,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> Accuracy {
        self.tally.accuracy()
    }
}

/// Eval-mode loss, predictions and per-category exact-match tally.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[QaSample],
    questions: &Vocab,
    answers: &Vocab,
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut tally = Tally::default();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&QaSample> = chunk.iter().collect();
        let batch = encode_batch(&refs, questions, answers)?;
        let mut s = Session::eval(&model.store);
        let out = model.forward(&mut s, &batch)?;
        let l = s.graph.bce(out.probs, &batch.targets.cast())?;
        loss += s.value(l).data()[0].as_f64() * chunk.len() as f64;
        let v = model.config.answer_vocab;
        for (i, row) in s.value(out.probs).data().chunks(v).enumerate() {
            let p = predict(row);
            tally.add(batch.categories[i], batch.answers[i] == Some(p));
            predictions.push(p);
        }
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        tally,
        predictions,
    })
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub history: Vec<Metrics>,
    /// 1-indexed epoch with the best validation "all" accuracy; ties go
    /// to the earlier epoch.
    pub best_epoch: usize,
    pub best_params: Vec<Tensor<T>>,
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.jsonl"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step)
}

/// Loss and parameter gradients for one batch in train mode.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    seed: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut s = Session::new(&model.store, Mode::Train, seed);
    let out = model.forward(&mut s, batch)?;
    let loss = s.graph.bce(out.probs, &batch.targets.cast())?;
    let value = s.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient { path: "loss".into() });
    }
    let mut grads = s.backward(loss)?;
    model.constrain_grads(&mut grads);
    Ok((value, grads))
}

/// Trains for `config.schedule.epochs` epochs. Each epoch visits the
/// training samples in a fresh seeded order; validation runs after every
/// epoch. With `out`, metrics lines are appended as epochs finish and the
/// best and last checkpoints are written.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[QaSample],
    val_set: &[QaSample],
    (questions, answers): (&Vocab, &Vocab),
    config: &TrainConfig,
    out: Option<&OutputPaths>,
    mut on_epoch: impl FnMut(&Metrics),
) -> Result<TrainReport<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut metrics_file = match out {
        Some(o) => Some(fs::File::create(&o.metrics)?),
        None => None,
    };
    let mut adam = Adam::new(&model.store, config.adam.clone());
    let mut history = Vec::with_capacity(config.schedule.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut best_params = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=config.schedule.epochs {
        let lr = config.schedule.lr_at_epoch(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let encode = |idx: &[usize]| {
            let refs: Vec<&QaSample> = idx.iter().map(|&i| &train_set[i]).collect();
            encode_batch(&refs, questions, answers)
        };
        let mut loss_sum = 0.0;
        let mut run = |batch: Result<Batch>| -> Result<()> {
            let batch = batch?;
            let (loss, grads) = batch_gradients(model, &batch, step_seed(config.seed, step))?;
            adam.step(&mut model.store, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
            Ok(())
        };
        if config.prefetch {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = sync_channel::<Result<Batch>>(2);
                let chunks = &chunks;
                scope.spawn(move || {
                    for idx in chunks {
                        if tx.send(encode(idx)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    run(batch)?;
                }
                Ok(())
            })?;
        } else {
            for idx in &chunks {
                run(encode(idx))?;
            }
        }
        let eval = evaluate(model, val_set, questions, answers, config.batch_size.max(256))?;
        let metrics = Metrics {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: eval.loss,
            accuracy: eval.accuracy(),
        };
        let score = metrics.accuracy.all.unwrap_or(0.0);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, epoch));
            best_params = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            if let Some(o) = out {
                save_checkpoint(model, epoch, &o.best)?;
            }
        }
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&metrics).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    if let Some(o) = out {
        save_checkpoint(model, config.schedule.epochs, &o.last)?;
    }
    Ok(TrainReport {
        history,
        best_epoch: best.map_or(1, |(_, e)| e),
        best_params,
    })
}

impl<T: Scalar> Model<T> {
    /// Replaces every parameter value, in store order.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Contract("parameter count mismatch".into()));
        }
        let ids: Vec<_> = self.store.ids().collect();
        for (id, v) in ids.into_iter().zip(values) {
            let p = self.store.get_mut(id);
            if p.value.shape() != v.shape() {
                return Err(Error::dim("set_params", v.shape(), p.value.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorSpec};
    use crate::model::ModelConfig;

    #[test]
    fn tally_examples() {
        let mut t = Tally::default();
        t.add(Category::YesNo, true);
        t.add(Category::YesNo, false);
        let a = t.accuracy();
        assert_eq!(
            (a.all, a.yesno, a.other, a.number),
            (Some(50.0), Some(50.0), None, None)
        );
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics {
            epoch: 1,
            lr: 2.5e-5,
            train_loss: 0.5,
            val_loss: 0.6,
            accuracy: Accuracy {
                all: Some(50.0),
                other: None,
                yesno: Some(50.0),
                number: None,
            },
        };
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "all",
                "epoch",
                "lr",
                "number",
                "other",
                "train_loss",
                "val_loss",
                "yesno"
            ]
        );
    }

    fn setup() -> (Model<f64>, Vec<QaSample>, Vocab, Vocab, TrainConfig) {
        let g = generate_dataset(12, 3, &GeneratorSpec::default(), 1).unwrap();
        let c = ModelConfig {
            d_in: 22,
            question_vocab: g.question_vocab.len(),
            answer_vocab: g.answer_vocab.len(),
            ..ModelConfig::tiny()
        };
        let tc = TrainConfig {
            batch_size: 8,
            schedule: Schedule {
                epochs: 3,
                ..Schedule::paper()
            },
            ..TrainConfig::paper()
        };
        (
            Model::build(&c).unwrap(),
            g.samples,
            g.question_vocab,
            g.answer_vocab,
            tc,
        )
    }

    #[test]
    fn reproducible_history_with_and_without_prefetch() {
        let (m0, samples, q, a, tc) = setup();
        let mut runs = Vec::new();
        for prefetch in [true, false, true] {
            let mut m = Model::<f64>::build(&m0.config).unwrap();
            let cfg = TrainConfig {
                prefetch,
                ..tc.clone()
            };
            let r = train(&mut m, &samples, &samples, (&q, &a), &cfg, None, |_| {}).unwrap();
            assert_eq!(r.history.len(), 3);
            runs.push(r.history);
        }
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0], runs[2]);
    }

    #[test]
    fn writes_metrics_lines_and_checkpoints() {
        let (mut m, samples, q, a, tc) = setup();
        let dir = tempfile::tempdir().unwrap();
        let paths = OutputPaths::in_dir(dir.path());
        train(&mut m, &samples, &samples, (&q, &a), &tc, Some(&paths), |_| {}).unwrap();
        let text = fs::read_to_string(&paths.metrics).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(paths.best.exists() && paths.last.exists());
    }
}
