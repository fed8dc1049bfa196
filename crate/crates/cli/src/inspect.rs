//! `gradcheck` and `dump-attention`.

use std::path::PathBuf;

use clap::Args;
use mcaoan::data::{encode_batch, Vocab};
use mcaoan::model::{load_checkpoint, predict, read_checkpoint, Model, ModelConfig};
use mcaoan::nn::Session;
use mcaoan::verify::{self, Options, Report, MODULES, TOLERANCE};
use mcaoan::{Precision, Scalar};
use serde::{Deserialize, Serialize};

use crate::run::{check_compatible, load_split};
use crate::{split_file, write_json, CliError};

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-parameter report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub corrupt_gate_grad: bool,
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<Report, CliError> {
    let config = ModelConfig::preset(&args.preset)?;
    let opts = Options {
        seed: args.seed,
        corrupt_gate_grad: args.corrupt_gate_grad,
    };
    Ok(verify::run_suite(&config, &opts)?)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let report = run_gradcheck(args)?;
    if let Some(out) = &args.out {
        write_json(out, &report.checks)?;
    }
    println!("{:<12} {:>7} {:>14}", "module", "checks", "worst rel err");
    for m in MODULES {
        let n = report.checks.iter().filter(|c| c.module == m).count();
        let w = report.worst(m).map_or("-".into(), |w| format!("{w:.3e}"));
        println!("{m:<12} {n:>7} {w:>14}");
    }
    let failures = report.failures(TOLERANCE);
    if failures.is_empty() {
        println!(
            "PASS: worst relative error {:.3e} < {TOLERANCE:e}",
            report.worst_overall()
        );
        return Ok(());
    }
    for f in &failures {
        println!(
            "FAIL {} / {} / {}: {:.3e}",
            f.module, f.check, f.param, f.max_rel_err
        );
    }
    Err(CliError::Verification(format!(
        "{} gradient checks exceed {TOLERANCE:e}",
        failures.len()
    )))
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A split file, or a data directory (uses test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based position of the sample in the split file.
    #[arg(long)]
    pub sample_id: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Attention probabilities of one unit: `heads × queries × keys`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitAttention {
    pub unit: String,
    pub queries: Vec<String>,
    pub keys: Vec<String>,
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Largest `|Σ_k p − 1|` over every row.
    pub max_row_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub sample_id: usize,
    pub scene_id: usize,
    pub question: Vec<String>,
    pub answer: String,
    pub predicted: String,
    pub objects: usize,
    pub units: Vec<UnitAttention>,
    pub pooled_objects: Vec<f64>,
    pub pooled_words: Vec<f64>,
    /// `(w_x, w_y)`: image and question weights.
    pub modality: [f64; 2],
}

pub fn dump_attention(args: &DumpArgs) -> Result<AttentionDump, CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    let (config, _, _) = read_checkpoint(&args.checkpoint)?;
    let (ds, data_ref) = load_split(&split_file(&args.data, "test"))?;
    let (q, a) = check_compatible(&config, &ds, &data_ref.path)?;
    if args.sample_id >= ds.samples.len() {
        return Err(CliError::Usage(format!(
            "sample {} not in {} ({} samples)",
            args.sample_id,
            data_ref.path,
            ds.samples.len()
        )));
    }
    match config.precision {
        Precision::F32 => dump_with(
            &load_checkpoint::<f32>(&args.checkpoint)?.0,
            &ds.samples,
            args.sample_id,
            (&q, &a),
        ),
        Precision::F64 => dump_with(
            &load_checkpoint::<f64>(&args.checkpoint)?.0,
            &ds.samples,
            args.sample_id,
            (&q, &a),
        ),
    }
}

fn dump_with<T: Scalar>(
    model: &Model<T>,
    samples: &[mcaoan::data::QaSample],
    id: usize,
    (questions, answers): (&Vocab, &Vocab),
) -> Result<AttentionDump, CliError> {
    let sample = &samples[id];
    let batch = encode_batch(&[sample], questions, answers)?;
    let mut s = Session::eval(&model.store);
    s.enable_trace();
    let out = model.forward(&mut s, &batch)?;
    let values = |v| -> Vec<f64> { s.value(v).data().iter().map(|x| x.as_f64()).collect() };

    let m = batch.object_counts[0];
    let n = batch.token_lens[0].min(model.config.max_question_len);
    let words: Vec<String> = sample.question.iter().take(n).cloned().collect();
    let objects: Vec<String> = (0..m).map(|i| format!("object {i}")).collect();
    let heads = model.config.heads;
    let mut units = Vec::new();
    for (label, var) in s.trace() {
        let Some(kind) = label.rsplit('.').next().filter(|_| label.contains('.')) else {
            continue;
        };
        let (queries, keys) = match (label.starts_with("encoder"), kind) {
            (true, _) => (&words, &words),
            (false, "self") => (&objects, &objects),
            (false, "guided") => (&objects, &words),
            _ => continue,
        };
        let data = values(*var);
        let (nq, nk) = (queries.len(), keys.len());
        let mut max_row_error: f64 = 0.0;
        let heads_out: Vec<Vec<Vec<f64>>> = (0..heads)
            .map(|h| {
                (0..nq)
                    .map(|i| {
                        let row = data[(h * nq + i) * nk..(h * nq + i + 1) * nk].to_vec();
                        max_row_error = max_row_error.max((row.iter().sum::<f64>() - 1.0).abs());
                        row
                    })
                    .collect()
            })
            .collect();
        units.push(UnitAttention {
            unit: label.clone(),
            queries: queries.clone(),
            keys: keys.clone(),
            heads: heads_out,
            max_row_error,
        });
    }
    let probs = values(out.probs);
    let modality = values(out.modality);
    Ok(AttentionDump {
        sample_id: id,
        scene_id: sample.scene_id,
        question: sample.question.clone(),
        answer: sample.answer.clone(),
        predicted: answers.token(predict(&probs)).unwrap_or("?").to_string(),
        objects: m,
        units,
        pooled_objects: values(out.pool_image)[..m].to_vec(),
        pooled_words: values(out.pool_question)[..n].to_vec(),
        modality: [modality[0], modality[1]],
    })
}

pub fn cmd_dump_attention(args: &DumpArgs) -> Result<(), CliError> {
    let dump = dump_attention(args)?;
    match &args.out {
        Some(path) => write_json(path, &dump),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&dump).expect("dump serialises")
            );
            Ok(())
        }
    }
}
