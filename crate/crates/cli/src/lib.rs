//! `mcaoan` command-line driver: synthetic data generation, training,
//! evaluation, gradient verification, ablations and attention dumps.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 usage, configuration or I/O error, 3 non-finite gradient abort.

pub mod ablate;
pub mod config;
pub mod generate;
pub mod inspect;
pub mod run;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::RunConfig;

pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Verification(String),
    Core(mcaoan::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Core(mcaoan::Error::NonFiniteGradient { .. }) => EXIT_NUMERIC,
            CliError::Usage(_) | CliError::Core(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verification(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mcaoan::Error> for CliError {
    fn from(e: mcaoan::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mcaoan",
    version,
    about = "Modular co-attention on attention network for toy VQA"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val/test splits.
    Generate(generate::GenerateArgs),
    /// Train a model and write metrics and checkpoints.
    Train(run::TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(run::EvalArgs),
    /// Finite-difference gradient check of every module.
    Gradcheck(inspect::GradcheckArgs),
    /// Sweep the cascade depth L.
    #[command(name = "ablate-l")]
    AblateL(ablate::AblateLArgs),
    /// Compare the AoA block against the plain attention output.
    #[command(name = "ablate-gate")]
    AblateGate(ablate::AblateGateArgs),
    /// Dump attention maps, pooled weights and modality weights for one sample.
    #[command(name = "dump-attention")]
    DumpAttention(inspect::DumpArgs),
}

/// Config file and overrides shared by the training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run config; omitted fields take desk-preset values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dot-path override such as `model.L=4`; repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate::cmd_generate(&a),
        Command::Train(a) => run::cmd_train(&a),
        Command::Eval(a) => run::cmd_eval(&a),
        Command::Gradcheck(a) => inspect::cmd_gradcheck(&a),
        Command::AblateL(a) => ablate::cmd_ablate_l(&a),
        Command::AblateGate(a) => ablate::cmd_ablate_gate(&a),
        Command::DumpAttention(a) => inspect::cmd_dump_attention(&a),
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// `data` itself when it is a file, otherwise `<data>/<split>.jsonl`.
pub fn split_file(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

pub fn hash_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

/// FNV-1a of a file's bytes, as 16 hex digits.
pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hash_hex(mcaoan::data::fnv1a(&bytes)))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serialises");
    fs::write(path, text + "\n").map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Accuracy table in the `All / Other / Y/N / Num` layout, optionally
/// with a leading row-label column.
pub fn accuracy_table(label: Option<&str>, rows: &[(String, mcaoan::trainer::Accuracy)]) -> String {
    let mut out = String::new();
    let lw = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(label.map(str::len))
        .max()
        .unwrap_or(0);
    if let Some(l) = label {
        out.push_str(&format!("{l:<lw$}  "));
    }
    out.push_str(&format!("{:>7}{:>8}{:>8}{:>8}\n", "All", "Other", "Y/N", "Num"));
    for (l, a) in rows {
        if label.is_some() {
            out.push_str(&format!("{l:<lw$}  "));
        }
        out.push_str(&format!(
            "{:>7}{:>8}{:>8}{:>8}\n",
            cell(a.all),
            cell(a.other),
            cell(a.yesno),
            cell(a.number)
        ));
    }
    out
}
