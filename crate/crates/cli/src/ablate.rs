//! `ablate-l` and `ablate-gate`: train one model per (value, seed), evaluate
//! each best checkpoint on the held-out split and tabulate per-column medians.

use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use clap::Args;
use mcaoan::trainer::Accuracy;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::{default_eval_path, run_eval, run_train, EvalReport, RunManifest};
use crate::{accuracy_table, create_dir, split_file, write_json, CliError, ConfigArgs};

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Data directory with train/val/test splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds per value; seeds are 0..k.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Concurrent runs, each in its own process.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateLArgs {
    #[command(flatten)]
    pub sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 6, 8])]
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateGateArgs {
    #[command(flatten)]
    pub sweep: SweepArgs,
}

/// One axis of a sweep: the override path and the values it takes.
#[derive(Clone, Debug)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
    /// Row label, e.g. `L=2`.
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub value: String,
    pub seed: u64,
    pub dir: String,
    pub best_epoch: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub value: String,
    pub runs: usize,
    #[serde(flatten)]
    pub median: Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub key: String,
    pub seeds: u64,
    pub rows: Vec<Row>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let rows: Vec<(String, Accuracy)> = self.rows.iter().map(|r| (r.label.clone(), r.median)).collect();
        accuracy_table(Some(&self.key), &rows)
    }
}

/// Median of the present values; the mean of the middle pair for an even count.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    })
}

pub fn median_accuracy(runs: &[&EvalReport]) -> Accuracy {
    Accuracy {
        all: median(runs.iter().map(|r| r.accuracy.all)),
        other: median(runs.iter().map(|r| r.accuracy.other)),
        yesno: median(runs.iter().map(|r| r.accuracy.yesno)),
        number: median(runs.iter().map(|r| r.accuracy.number)),
    }
}

struct Job {
    label: String,
    value: String,
    seed: u64,
    dir: PathBuf,
    config: RunConfig,
    overrides: Vec<String>,
}

fn spawn(exe: &Path, job: &Job, data: &Path) -> Result<Child, CliError> {
    let cfg = job.dir.join("config.json");
    write_json(&cfg, &job.config)?;
    let script = "\"$0\" train --config \"$1\" --data \"$2\" --out \"$3\" --quiet > /dev/null \
        && \"$0\" eval --checkpoint \"$3/best.ckpt\" --data \"$2\" > /dev/null";
    Command::new("sh")
        .arg("-c")
        .arg(script)
        .arg(exe)
        .arg(&cfg)
        .arg(data)
        .arg(&job.dir)
        .spawn()
        .map_err(|e| CliError::Usage(format!("cannot spawn run: {e}")))
}

/// Runs every (value, seed) pair of `axis` and writes per-run records plus
/// the median table under `out`. With `jobs > 1`, runs execute as
/// independent `mcaoan` processes.
pub fn sweep(
    base: &RunConfig,
    axis: &Axis,
    args: &SweepArgs,
    quiet: bool,
) -> Result<AblationTable, CliError> {
    let test = split_file(&args.data, "test");
    if !args.data.is_dir() || !test.is_file() {
        return Err(CliError::Usage(format!(
            "{} must hold train, val and test splits",
            args.data.display()
        )));
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    create_dir(&args.out.join("runs"))?;
    let mut jobs = Vec::new();
    for (value, label) in axis.values.iter().zip(&axis.labels) {
        for seed in 0..args.seeds {
            let mut overrides = args.config.overrides.clone();
            overrides.push(format!("{}={value}", axis.key));
            overrides.push(format!("model.seed={seed}"));
            overrides.push(format!("train.seed={seed}"));
            let mut config = base.clone();
            config.apply_overrides(&overrides)?;
            config.validate()?;
            let dir = args
                .out
                .join("runs")
                .join(format!("{}-seed{seed}", label.replace('=', "")));
            create_dir(&dir)?;
            jobs.push(Job {
                label: label.clone(),
                value: value.clone(),
                seed,
                dir,
                config,
                overrides,
            });
        }
    }

    if args.jobs > 1 {
        let exe = std::env::current_exe()?;
        let mut pending = jobs.iter();
        let mut running: Vec<(Child, &Job)> = Vec::new();
        loop {
            while running.len() < args.jobs {
                let Some(job) = pending.next() else { break };
                running.push((spawn(&exe, job, &args.data)?, job));
            }
            let Some((mut child, job)) = (!running.is_empty()).then(|| running.remove(0)) else {
                break;
            };
            let status = child.wait()?;
            if !status.success() {
                let code = status.code().unwrap_or(i32::from(crate::EXIT_USAGE));
                let msg = format!("run {} seed {} failed with exit code {code}", job.label, job.seed);
                return Err(if code == i32::from(crate::EXIT_NUMERIC) {
                    CliError::Core(mcaoan::Error::NonFiniteGradient { path: msg })
                } else {
                    CliError::Usage(msg)
                });
            }
        }
    }

    let mut records = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let ckpt = job.dir.join("best.ckpt");
        let (manifest, eval) = if args.jobs > 1 {
            (
                read_json(&job.dir.join("run.json"))?,
                read_json(&default_eval_path(&ckpt))?,
            )
        } else {
            if !quiet {
                eprintln!("{} seed {}", job.label, job.seed);
            }
            let m: RunManifest = run_train(job.config.clone(), &args.data, &job.dir, &job.overrides, true)?;
            let report = run_eval(&ckpt, &args.data)?;
            write_json(&default_eval_path(&ckpt), &report)?;
            (m, report)
        };
        let record = RunRecord {
            label: job.label.clone(),
            value: job.value.clone(),
            seed: job.seed,
            dir: job.dir.display().to_string(),
            best_epoch: manifest.best_epoch,
            eval,
        };
        let name = format!("{}-seed{}.json", job.label.replace('=', ""), job.seed);
        write_json(&args.out.join("runs").join(name), &record)?;
        records.push(record);
    }

    let rows = axis
        .values
        .iter()
        .zip(&axis.labels)
        .map(|(value, label)| {
            let runs: Vec<&EvalReport> = records
                .iter()
                .filter(|r| &r.label == label)
                .map(|r| &r.eval)
                .collect();
            Row {
                label: label.clone(),
                value: value.clone(),
                runs: runs.len(),
                median: median_accuracy(&runs),
            }
        })
        .collect();
    let table = AblationTable {
        key: axis.key.clone(),
        seeds: args.seeds,
        rows,
    };
    write_json(&args.out.join("ablation.json"), &table)?;
    Ok(table)
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn l_axis(values: &[usize]) -> Axis {
    Axis {
        key: "model.L".into(),
        values: values.iter().map(usize::to_string).collect(),
        labels: values.iter().map(|l| format!("L={l}")).collect(),
    }
}

pub fn gate_axis() -> Axis {
    Axis {
        key: "model.block".into(),
        values: vec!["aoa".into(), "plain".into()],
        labels: vec!["block=aoa".into(), "block=plain".into()],
    }
}

pub fn cmd_ablate_l(args: &AblateLArgs) -> Result<(), CliError> {
    if args.values.is_empty() {
        return Err(CliError::Usage("--values must list at least one depth".into()));
    }
    let base = args.sweep.config.resolve()?;
    let table = sweep(&base, &l_axis(&args.values), &args.sweep, false)?;
    print!("{}", table.render());
    Ok(())
}

pub fn cmd_ablate_gate(args: &AblateGateArgs) -> Result<(), CliError> {
    let base = args.sweep.config.resolve()?;
    let table = sweep(&base, &gate_axis(), &args.sweep, false)?;
    print!("{}", table.render());
    if let [aoa, plain] = &table.rows[..] {
        if let (Some(a), Some(p)) = (aoa.median.all, plain.median.all) {
            println!("median All difference (aoa - plain): {:+.2}", a - p);
        }
    }
    Ok(())
}
