//! `train` and `eval`.

use std::path::{Path, PathBuf};

use clap::Args;
use mcaoan::data::{read_dataset, Category, Dataset, Vocab};
use mcaoan::model::{load_checkpoint, read_checkpoint, Model, ModelConfig};
use mcaoan::trainer::{evaluate, train, Accuracy, OutputPaths, TrainConfig};
use mcaoan::{Precision, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{accuracy_table, create_dir, file_hash, split_file, write_json, CliError, ConfigArgs};

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets both the initialisation and the shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A split file, or a data directory (uses test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the JSON report; defaults to eval.json next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: String,
    pub fnv1a: String,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub train_data: DataRef,
    pub val_data: DataRef,
    pub num_params: usize,
    pub epochs: usize,
    pub best_epoch: usize,
}

pub fn load_split(path: &Path) -> Result<(Dataset, DataRef), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("dataset {} not found", path.display())));
    }
    let ds = read_dataset(path)?;
    let r = DataRef {
        path: path.display().to_string(),
        fnv1a: file_hash(path)?,
    };
    Ok((ds, r))
}

fn vocabs(ds: &Dataset, path: &str) -> Result<(Vocab, Vocab), CliError> {
    if ds.manifest.vocab.is_none() {
        return Err(CliError::Usage(format!("{path} carries no vocabulary")));
    }
    Ok(ds.vocabs())
}

/// Trains with `cfg` on `<data>/train.jsonl`, validating on `val.jsonl`.
/// Input width and vocabulary sizes are taken from the data.
pub fn run_train(
    mut cfg: RunConfig,
    data: &Path,
    out: &Path,
    overrides: &[String],
    quiet: bool,
) -> Result<RunManifest, CliError> {
    if !data.is_dir() {
        return Err(CliError::Usage(format!(
            "data directory {} not found",
            data.display()
        )));
    }
    let (train_ds, train_ref) = load_split(&data.join("train.jsonl"))?;
    let (val_ds, val_ref) = load_split(&data.join("val.jsonl"))?;
    let (q, a) = vocabs(&train_ds, &train_ref.path)?;
    if val_ds.vocabs() != (q.clone(), a.clone()) || val_ds.manifest.d_in != train_ds.manifest.d_in {
        return Err(CliError::Usage(
            "train and val splits disagree on vocabulary or width".into(),
        ));
    }
    cfg.model.d_in = train_ds.manifest.d_in;
    cfg.model.question_vocab = q.len();
    cfg.model.answer_vocab = a.len();
    cfg.validate()?;
    create_dir(out)?;

    let paths = OutputPaths::in_dir(out);
    let fit = Fit {
        model: &cfg.model,
        train: &cfg.train,
        data: (&train_ds, &val_ds),
        vocab: (&q, &a),
        paths: &paths,
        quiet,
    };
    let (best_epoch, num_params) = match cfg.model.precision {
        Precision::F32 => fit.run::<f32>()?,
        Precision::F64 => fit.run::<f64>()?,
    };
    let manifest = RunManifest {
        seed: cfg.model.seed,
        epochs: cfg.train.schedule.epochs,
        config: cfg,
        overrides: overrides.to_vec(),
        train_data: train_ref,
        val_data: val_ref,
        num_params,
        best_epoch,
    };
    write_json(&out.join("run.json"), &manifest)?;
    Ok(manifest)
}

struct Fit<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: (&'a Dataset, &'a Dataset),
    vocab: (&'a Vocab, &'a Vocab),
    paths: &'a OutputPaths,
    quiet: bool,
}

impl Fit<'_> {
    fn run<T: Scalar>(&self) -> Result<(usize, usize), CliError> {
        let mut model = Model::<T>::build(self.model)?;
        let quiet = self.quiet;
        let report = train(
            &mut model,
            &self.data.0.samples,
            &self.data.1.samples,
            self.vocab,
            self.train,
            Some(self.paths),
            |m| {
                if !quiet {
                    println!(
                        "epoch {:>3}  lr {:.3e}  train_loss {:.5}  val_loss {:.5}  val_all {}",
                        m.epoch,
                        m.lr,
                        m.train_loss,
                        m.val_loss,
                        m.accuracy.all.map_or("-".into(), |v| format!("{v:.2}"))
                    );
                }
            },
        )?;
        Ok((report.best_epoch, model.num_params()))
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let m = run_train(cfg, &args.data, &args.out, &args.config.overrides, args.quiet)?;
    println!(
        "best epoch {} of {}; {} parameters; wrote {}",
        m.best_epoch,
        m.epochs,
        m.num_params,
        args.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub other: usize,
    pub yesno: usize,
    pub number: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub epoch: usize,
    pub data: DataRef,
    pub samples: usize,
    pub loss: f64,
    #[serde(flatten)]
    pub accuracy: Accuracy,
    pub counts: Counts,
}

/// Checks that a dataset fits a model configuration.
pub fn check_compatible(config: &ModelConfig, ds: &Dataset, path: &str) -> Result<(Vocab, Vocab), CliError> {
    let (q, a) = vocabs(ds, path)?;
    let found = [ds.manifest.d_in, q.len(), a.len()];
    let expected = [config.d_in, config.question_vocab, config.answer_vocab];
    if found != expected {
        return Err(CliError::Usage(format!(
            "config mismatch: checkpoint expects (d_in, question vocab, answer vocab) = {expected:?}, {path} has {found:?}"
        )));
    }
    Ok((q, a))
}

pub fn run_eval(checkpoint: &Path, data: &Path) -> Result<EvalReport, CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let (config, _, _) = read_checkpoint(checkpoint)?;
    let (ds, data_ref) = load_split(&split_file(data, "test"))?;
    let (q, a) = check_compatible(&config, &ds, &data_ref.path)?;
    let (ev, epoch) = match config.precision {
        Precision::F32 => {
            let (m, meta) = load_checkpoint::<f32>(checkpoint)?;
            (evaluate(&m, &ds.samples, &q, &a, EVAL_BATCH)?, meta.epoch)
        }
        Precision::F64 => {
            let (m, meta) = load_checkpoint::<f64>(checkpoint)?;
            (evaluate(&m, &ds.samples, &q, &a, EVAL_BATCH)?, meta.epoch)
        }
    };
    let count = |c: Category| ds.samples.iter().filter(|s| s.category == c).count();
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        epoch,
        samples: ds.samples.len(),
        data: data_ref,
        loss: ev.loss,
        accuracy: ev.accuracy(),
        counts: Counts {
            other: count(Category::Other),
            yesno: count(Category::YesNo),
            number: count(Category::Number),
        },
    })
}

pub fn default_eval_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name("eval.json")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let report = run_eval(&args.checkpoint, &args.data)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_eval_path(&args.checkpoint));
    write_json(&out, &report)?;
    print!("{}", accuracy_table(None, &[(String::new(), report.accuracy)]));
    println!(
        "{} samples, loss {:.6}; wrote {}",
        report.samples,
        report.loss,
        out.display()
    );
    Ok(())
}
