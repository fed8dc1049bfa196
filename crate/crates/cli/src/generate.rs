//! `generate`: writes the synthetic splits and a manifest describing them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use mcaoan::data::{generate_splits, write_dataset, Dataset, GeneratorSpec, QaSample};
use serde::{Deserialize, Serialize};

use crate::{create_dir, file_hash, write_json, CliError};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    pub scenes: usize,
    #[arg(long, default_value_t = 4)]
    pub qa_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace half of the val/test questions with absent-object questions.
    #[arg(long)]
    pub distractor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub samples: usize,
    pub fnv1a: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub scenes: usize,
    pub qa_per_scene: usize,
    pub seed: u64,
    pub distractor: bool,
    pub generator: GeneratorSpec,
    pub d_in: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
    pub splits: BTreeMap<String, SplitInfo>,
}

pub fn generate(args: &GenerateArgs) -> Result<DataManifest, CliError> {
    let spec = GeneratorSpec::default();
    let splits = generate_splits(args.scenes, args.qa_per_scene, &spec, args.seed, args.distractor)?;
    create_dir(&args.out)?;
    let mut infos = BTreeMap::new();
    let parts: [(&str, &Vec<QaSample>); 3] = [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ];
    for (name, samples) in parts {
        let file = format!("{name}.jsonl");
        let path = args.out.join(&file);
        let ds = Dataset::new(
            splits.d_in,
            &splits.question_vocab,
            &splits.answer_vocab,
            samples.clone(),
        );
        write_dataset(&path, &ds).map_err(|e| write_error(&path, e))?;
        infos.insert(
            name.to_string(),
            SplitInfo {
                file,
                samples: samples.len(),
                fnv1a: file_hash(&path)?,
            },
        );
    }
    let manifest = DataManifest {
        scenes: args.scenes,
        qa_per_scene: args.qa_per_scene,
        seed: args.seed,
        distractor: args.distractor,
        generator: spec,
        d_in: splits.d_in,
        question_vocab: splits.question_vocab.len(),
        answer_vocab: splits.answer_vocab.len(),
        splits: infos,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_error(path: &Path, e: mcaoan::Error) -> CliError {
    CliError::Usage(format!("cannot write {}: {e}", path.display()))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let m = generate(args)?;
    for name in SPLITS {
        let s = &m.splits[name];
        println!("{:<6} {:>6} samples  fnv1a {}", name, s.samples, s.fnv1a);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
