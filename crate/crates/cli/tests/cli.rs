use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mcaoan::data::{read_dataset, write_dataset, Dataset, Vocab};
use mcaoan::model::load_checkpoint;
use mcaoan::trainer::evaluate;
use mcaoan_cli::ablate::{median, AblationTable, RunRecord};
use mcaoan_cli::generate::DataManifest;
use mcaoan_cli::inspect::AttentionDump;
use mcaoan_cli::run::{EvalReport, RunManifest, EVAL_BATCH};
use mcaoan_cli::RunConfig;
use tempfile::TempDir;

fn mcaoan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcaoan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mcaoan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mcaoan(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read<V: serde::de::DeserializeOwned>(p: &Path) -> V {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: &str = r#"{
  "model": {"d": 8, "heads": 2, "L": 1, "embed_dim": 6, "gate_hidden": [6, 4], "mutan_dim": 4, "mutan_rank": 2},
  "train": {"batch_size": 16, "schedule": {"epochs": 2}}
}"#;

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    config: PathBuf,
    run: PathBuf,
}

/// One small dataset and one trained tiny run shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let config = dir.path().join("tiny.json");
        let run = dir.path().join("run");
        fs::write(&config, TINY).unwrap();
        ok(&["generate", "--out", s(&data), "--scenes", "40", "--seed", "3"]);
        ok(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--override",
            "model.L=2",
        ]);
        Fixture {
            _dir: dir,
            data,
            config,
            run,
        }
    })
}

#[test]
fn generate_is_deterministic_and_splits_80_10_10() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--out", s(out), "--scenes", "100", "--seed", "7"]);
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: DataManifest = read(&a.join("manifest.json"));
    let total: usize = m.splits.values().map(|x| x.samples).sum();
    for (name, frac) in [("train", 0.8), ("val", 0.1), ("test", 0.1)] {
        let n = m.splits[name].samples as f64;
        assert!((n - frac * total as f64).abs() <= 1.0, "{name}: {n} of {total}");
    }
}

#[test]
fn distractor_touches_only_held_out_splits() {
    let dir = TempDir::new().unwrap();
    let (plain, dist) = (dir.path().join("p"), dir.path().join("d"));
    ok(&["generate", "--out", s(&plain), "--scenes", "60", "--seed", "1"]);
    ok(&[
        "generate",
        "--out",
        s(&dist),
        "--scenes",
        "60",
        "--seed",
        "1",
        "--distractor",
    ]);
    let load = |d: &Path, f: &str| read_dataset(d.join(f)).unwrap().samples;
    assert_eq!(load(&plain, "train.jsonl"), load(&dist, "train.jsonl"));
    for f in ["val.jsonl", "test.jsonl"] {
        let (p, d) = (load(&plain, f), load(&dist, f));
        assert_eq!(p.len(), d.len());
        let changed = p.iter().zip(&d).filter(|(x, y)| x != y).count();
        assert!(changed > 0 && changed <= p.len(), "{f}: {changed}");
    }
}

#[test]
fn unwritable_output_exits_2() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    assert_eq!(
        code(&["generate", "--out", s(&file.join("sub")), "--scenes", "5"]),
        2
    );
}

#[test]
fn paper_config_carries_paper_hyperparameters() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper.json");
    let c = RunConfig::load(Some(&path)).unwrap();
    assert_eq!((c.model.d, c.model.heads, c.model.layers), (512, 8, 6));
    assert_eq!((c.train.batch_size, c.train.schedule.epochs), (64, 13));
    assert_eq!(c, RunConfig::paper());
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    assert_eq!(RunConfig::load(Some(&desk)).unwrap(), RunConfig::default());
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let f = fixture();
    let m: RunManifest = read(&f.run.join("run.json"));
    assert_eq!(m.config.model.layers, 2);
    assert_eq!(m.overrides, vec!["model.L=2".to_string()]);
    assert_eq!(
        m.train_data.fnv1a,
        mcaoan_cli::file_hash(&f.data.join("train.jsonl")).unwrap()
    );
    let lines = fs::read_to_string(f.run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), m.epochs);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in [
            "epoch",
            "lr",
            "train_loss",
            "val_loss",
            "all",
            "other",
            "yesno",
            "number",
        ] {
            assert!(v.get(k).is_some(), "{k} missing in {line}");
        }
    }
    assert!(f.run.join("best.ckpt").is_file() && f.run.join("last.ckpt").is_file());
}

#[test]
fn training_is_reproducible_from_the_manifest() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("config.json");
    let m: RunManifest = read(&f.run.join("run.json"));
    fs::write(&cfg, serde_json::to_string(&m.config).unwrap()).unwrap();
    let again = dir.path().join("again");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&again),
        "--quiet",
    ]);
    assert_eq!(
        fs::read_to_string(f.run.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(again.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn invalid_config_exits_2() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = s(dir.path());
    let base = [
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        out,
    ];
    for o in [
        "model.heads=3",
        "model.L=two",
        "model.depth=1",
        "train.schedule.epochs=0",
    ] {
        let mut args = base.to_vec();
        args.extend(["--override", o]);
        assert_eq!(code(&args), 2, "{o}");
    }
    assert_eq!(
        code(&["train", "--data", s(&dir.path().join("none")), "--out", out]),
        2
    );
}

#[test]
fn diverging_training_exits_3() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let args = [
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(dir.path()),
        "-o",
        "train.schedule.warmup_rate=1e38",
        "-o",
        "train.schedule.cap=1e38",
        "-o",
        "train.adam.clip_norm=null",
    ];
    assert_eq!(code(&args), 3);
}

#[test]
fn eval_prints_table_and_matches_in_process_evaluation() {
    let f = fixture();
    let ckpt = f.run.join("best.ckpt");
    let dir = TempDir::new().unwrap();
    let j1 = dir.path().join("1.json");
    let j2 = dir.path().join("2.json");
    let out1 = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&j1),
    ]);
    let out2 = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&j2),
    ]);
    let header: Vec<&str> = out1.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["All", "Other", "Y/N", "Num"]);
    assert_eq!(out1.replace(s(&j1), ""), out2.replace(s(&j2), ""));
    assert_eq!(fs::read(&j1).unwrap(), fs::read(&j2).unwrap());

    let r: EvalReport = read(&j1);
    let ds = read_dataset(f.data.join("test.jsonl")).unwrap();
    let (q, a) = ds.vocabs();
    let (model, _) = load_checkpoint::<f32>(&ckpt).unwrap();
    let ev = evaluate(&model, &ds.samples, &q, &a, EVAL_BATCH).unwrap();
    assert_eq!(r.accuracy, ev.accuracy());
    assert_eq!(r.loss, ev.loss);
    // Batching changes only the f32 summation order.
    let small = evaluate(&model, &ds.samples, &q, &a, 7).unwrap();
    assert_eq!(r.accuracy, small.accuracy());
    assert!((r.loss - small.loss).abs() < 1e-5 * r.loss.max(1.0));
}

#[test]
fn eval_on_incompatible_data_exits_2() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let ds = read_dataset(f.data.join("test.jsonl")).unwrap();
    let (q, a) = ds.vocabs();
    let fewer = Vocab::from_tokens(a.tokens()[..a.len() - 1].to_vec());
    let keep: Vec<_> = ds
        .samples
        .iter()
        .filter(|x| fewer.get(&x.answer).is_some())
        .cloned()
        .collect();
    let bad = dir.path().join("bad.jsonl");
    write_dataset(&bad, &Dataset::new(ds.manifest.d_in, &q, &fewer, keep)).unwrap();
    let ckpt = f.run.join("best.ckpt");
    assert_eq!(code(&["eval", "--checkpoint", s(&ckpt), "--data", s(&bad)]), 2);
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&dir.path().join("no.ckpt")),
            "--data",
            s(&f.data)
        ]),
        2
    );
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = ok(&["gradcheck", "--preset", "tiny"]);
    for m in ["tensor-core", "nn", "attention", "fusion", "model"] {
        assert!(out.lines().any(|l| l.starts_with(m)), "{m} missing:\n{out}");
    }
    assert!(out.contains("PASS"));

    let bad = mcaoan(&["gradcheck", "--preset", "tiny", "--corrupt-gate-grad"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout);
    let fails: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert!(!fails.is_empty());
    assert!(fails.iter().all(|l| l.contains("fusion.gate")), "{fails:?}");
    assert_eq!(code(&["gradcheck", "--preset", "huge"]), 2);
}

#[test]
fn ablate_l_emits_table_with_recomputable_medians() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = ok(&[
        "ablate-l",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(dir.path()),
        "--values",
        "2,4,6,8",
        "--seeds",
        "2",
        "-o",
        "train.schedule.epochs=1",
    ]);
    let labels: Vec<&str> = out
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    assert_eq!(labels, ["L=2", "L=4", "L=6", "L=8"]);
    let header: Vec<&str> = out.lines().next().unwrap().split_whitespace().skip(1).collect();
    assert_eq!(header, ["All", "Other", "Y/N", "Num"]);

    let table: AblationTable = read(&dir.path().join("ablation.json"));
    for row in &table.rows {
        let runs: Vec<RunRecord> = (0..2)
            .map(|seed| {
                read(
                    &dir.path()
                        .join(format!("runs/{}-seed{seed}.json", row.label.replace('=', ""))),
                )
            })
            .collect();
        assert!(runs.iter().all(|r| r.label == row.label && r.eval.epoch >= 1));
        assert_eq!(row.median.all, median(runs.iter().map(|r| r.eval.accuracy.all)));
        assert_eq!(
            row.median.number,
            median(runs.iter().map(|r| r.eval.accuracy.number))
        );
    }
}

#[test]
fn single_cell_ablation_equals_train_then_eval() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let sweep = dir.path().join("sweep");
    ok(&[
        "ablate-l",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&sweep),
        "--values",
        "1",
        "--seeds",
        "1",
    ]);
    let direct = dir.path().join("direct");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&direct),
        "--seed",
        "0",
        "-o",
        "model.L=1",
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&direct.join("best.ckpt")),
        "--data",
        s(&f.data),
    ]);
    let a: EvalReport = read(&direct.join("eval.json"));
    let r: RunRecord = read(&sweep.join("runs/L1-seed0.json"));
    assert_eq!(a.accuracy, r.eval.accuracy);
    assert_eq!(a.loss, r.eval.loss);
    assert_eq!(
        fs::read(direct.join("metrics.jsonl")).unwrap(),
        fs::read(sweep.join("runs/L1-seed0/metrics.jsonl")).unwrap()
    );
}

#[test]
fn parallel_ablation_matches_sequential() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let common = [
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--seeds",
        "2",
        "-o",
        "train.schedule.epochs=1",
    ];
    let seq = dir.path().join("seq");
    let par = dir.path().join("par");
    let mut a = vec!["ablate-gate", "--out", s(&seq)];
    a.extend(common);
    let mut b = vec!["ablate-gate", "--out", s(&par), "--jobs", "2"];
    b.extend(common);
    let out_a = ok(&a);
    let out_b = ok(&b);
    assert_eq!(out_a.lines().filter(|l| l.starts_with("block=")).count(), 2);
    assert_eq!(out_a, out_b);
    let ta: AblationTable = read(&seq.join("ablation.json"));
    let tb: AblationTable = read(&par.join("ablation.json"));
    assert_eq!(ta, tb);
}

#[test]
fn attention_dump_is_normalised() {
    let f = fixture();
    let ckpt = f.run.join("best.ckpt");
    let out = ok(&[
        "dump-attention",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--sample-id",
        "2",
    ]);
    let d: AttentionDump = serde_json::from_str(&out).unwrap();
    assert_eq!(d.pooled_objects.len(), d.objects);
    assert!((d.pooled_objects.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!((d.pooled_words.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!((d.modality[0] + d.modality[1] - 1.0).abs() <= 1e-6);
    // L = 2: two encoder units and two (self, guided) decoder pairs.
    let names: Vec<&str> = d.units.iter().map(|u| u.unit.as_str()).collect();
    assert_eq!(
        names,
        [
            "encoder.0.self",
            "encoder.1.self",
            "decoder.0.self",
            "decoder.0.guided",
            "decoder.1.self",
            "decoder.1.guided"
        ]
    );
    for u in &d.units {
        assert_eq!(u.heads.len(), 2);
        assert!(u.max_row_error <= 1e-6, "{}: {}", u.unit, u.max_row_error);
        for row in u.heads.iter().flatten() {
            assert_eq!(row.len(), u.keys.len());
        }
    }
    assert_eq!(
        code(&[
            "dump-attention",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&f.data),
            "--sample-id",
            "100000"
        ]),
        2
    );
}
