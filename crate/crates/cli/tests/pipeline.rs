use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_layoutmatch"));
    c.env_remove("LAYOUTMATCH_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn layoutmatch");
    assert!(
        out.status.success(),
        "layoutmatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[encoder]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32
max_len = 40
proj_dim = 16
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    splits: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus.jsonl");
    let splits = root.join("splits.jsonl");
    let config = root.join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    run(&[
        "--seed",
        "5",
        "gen-corpus",
        "--classes",
        "16",
        "--per-class",
        "25",
        "--min-tokens",
        "20",
        "--max-tokens",
        "30",
        "--out",
        s(&corpus),
    ]);
    run(&[
        "--seed",
        "5",
        "make-splits",
        "--corpus",
        s(&corpus),
        "--out",
        s(&splits),
    ]);
    Fixture {
        _dir: dir,
        root,
        corpus,
        splits,
        config,
    }
}

/// Runs the full pipeline into `out` and returns the fine-tuned checkpoint paths.
fn pipeline(f: &Fixture, out: &Path) -> (PathBuf, PathBuf) {
    let vocab = out.join("vocab.txt");
    let c = s(&f.config);
    run(&["build-vocab", "--corpus", s(&f.corpus), "--out", s(&vocab)]);
    let text = out.join("text");
    let layout = out.join("layout");
    let cpt = out.join("cpt");
    let ft = out.join("ft");
    run(&[
        "--config",
        c,
        "--seed",
        "1",
        "pretrain-mlm",
        "--text-only",
        "--corpus",
        s(&f.corpus),
        "--vocab",
        s(&vocab),
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--eval-every",
        "2",
        "--out",
        s(&text),
    ]);
    run(&[
        "--config",
        c,
        "--seed",
        "2",
        "pretrain-mlm",
        "--init",
        s(&text.join("model.ckpt")),
        "--corpus",
        s(&f.corpus),
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--eval-every",
        "2",
        "--out",
        s(&layout),
    ]);
    run(&[
        "--seed",
        "3",
        "pretrain-cpt",
        "--corpus",
        s(&f.corpus),
        "--doc-ckpt",
        s(&layout.join("model.ckpt")),
        "--label-ckpt",
        s(&text.join("model.ckpt")),
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--eval-every",
        "2",
        "--out",
        s(&cpt),
    ]);
    run(&[
        "--seed",
        "4",
        "finetune",
        "--corpus",
        s(&f.corpus),
        "--split",
        s(&f.splits),
        "--split-name",
        "II",
        "--doc-ckpt",
        s(&cpt.join("doc.ckpt")),
        "--label-ckpt",
        s(&cpt.join("label.ckpt")),
        "--objective",
        "ce",
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--eval-every",
        "2",
        "--out",
        s(&ft),
    ]);
    (ft.join("doc.ckpt"), ft.join("label.ckpt"))
}

#[test]
fn gen_corpus_writes_one_line_per_document() {
    let f = fixture();
    let text = std::fs::read_to_string(&f.corpus).unwrap();
    assert_eq!(text.lines().count(), 400);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "tokens", "bboxes", "width", "height", "label"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let splits = std::fs::read_to_string(&f.splits).unwrap();
    assert_eq!(splits.lines().count(), 4);
}

#[test]
fn pipeline_is_reproducible_and_reports_macro_f1() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    let (doc_a, label_a) = pipeline(&f, &a);
    let (doc_b, label_b) = pipeline(&f, &b);
    assert_eq!(std::fs::read(&doc_a).unwrap(), std::fs::read(&doc_b).unwrap());
    assert_eq!(std::fs::read(&label_a).unwrap(), std::fs::read(&label_b).unwrap());

    let mut reports = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let r = f.root.join(format!("r{i}.json"));
        run(&[
            "--threads",
            threads,
            "evaluate",
            "--split",
            s(&f.splits),
            "--split-name",
            "II",
            "--part",
            "test",
            "--doc-ckpt",
            s(&doc_a),
            "--label-ckpt",
            s(&label_a),
            "--corpus",
            s(&f.corpus),
            "--out",
            s(&r),
        ]);
        reports.push(std::fs::read(&r).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report: Value = serde_json::from_slice(&reports[0]).unwrap();
    let f1 = report["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(report["split"], "II");
    assert_eq!(report["meta"]["pooling"], "Projected");
    assert_eq!(report["meta"]["doc_ckpt_sha256"].as_str().unwrap().len(), 64);

    let preds = f.root.join("preds.jsonl");
    run(&[
        "infer",
        "--corpus",
        s(&f.corpus),
        "--classes",
        "invoice, memo,letter",
        "--doc-ckpt",
        s(&doc_a),
        "--label-ckpt",
        s(&label_a),
        "--out",
        s(&preds),
    ]);
    let lines: Vec<Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 400);
    assert!(lines
        .iter()
        .all(|v| ["invoice", "memo", "letter"].contains(&v["predicted"].as_str().unwrap())));
}

#[test]
fn overlapping_split_exits_with_status_2() {
    let f = fixture();
    let first = std::fs::read_to_string(&f.splits).unwrap();
    let mut split: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let leaked = split["train_classes"][0].clone();
    split["test_classes"].as_array_mut().unwrap().push(leaked.clone());
    let bad = f.root.join("bad.jsonl");
    std::fs::write(&bad, format!("{split}\n")).unwrap();
    let out = bin()
        .args([
            "evaluate",
            "--split",
            s(&bad),
            "--corpus",
            s(&f.corpus),
            "--doc-ckpt",
            "none.ckpt",
            "--label-ckpt",
            "none.ckpt",
            "--out",
            s(&f.root.join("r.json")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split invariant violated"));

    let mut split: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    split["val_classes"].as_array_mut().unwrap().push(leaked);
    std::fs::write(&bad, format!("{split}\n")).unwrap();
    let out = bin()
        .args([
            "finetune",
            "--split",
            s(&bad),
            "--corpus",
            s(&f.corpus),
            "--doc-ckpt",
            "none.ckpt",
            "--label-ckpt",
            "none.ckpt",
            "--steps",
            "2",
            "--out",
            s(&f.root.join("ft")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split invariant violated"));
}

#[test]
fn bad_config_and_bad_flags_exit_with_status_2() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = bin()
        .args(["--config", s(&bad), "gen-corpus", "--out", s(&f.root.join("x.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["gen-corpus", "--classes", "2", "--out", s(&f.root.join("x.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args([
            "pretrain-cpt",
            "--corpus",
            s(&f.corpus),
            "--batch-size",
            "1",
            "--doc-ckpt",
            "a",
            "--label-ckpt",
            "b",
        ])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let p = dir.path().join(name);
        let mut c = bin();
        if let Some(v) = env {
            c.env("LAYOUTMATCH_SEED", v);
        }
        if let Some(v) = flag {
            c.args(["--seed", v]);
        }
        let st = c
            .args(["gen-corpus", "--classes", "4", "--per-class", "3", "--out", s(&p)])
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(p).unwrap()
    };
    let env7 = gen("a", Some("7"), None);
    let flag7 = gen("b", Some("8"), Some("7"));
    let env8 = gen("c", Some("8"), None);
    assert_eq!(env7, flag7);
    assert_ne!(env7, env8);
}

#[test]
fn help_lists_global_and_subcommand_flags() {
    let out = run(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--threads", "--deterministic", "--config", "--seed"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for cmd in [
        "gen-corpus",
        "make-splits",
        "build-vocab",
        "pretrain-mlm",
        "pretrain-cpt",
        "finetune",
        "evaluate",
        "infer",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let out = run(&["finetune", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--split",
        "--split-name",
        "--objective",
        "--steps",
        "--resume",
        "--stop-after",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
}
