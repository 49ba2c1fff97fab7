use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tagbert::config::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagbert")).args(args).output().expect("spawn tagbert")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "tagbert {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY: &[&str] = &[
    "--set", "model.num_layers=2",
    "--set", "model.hidden=16",
    "--set", "model.heads=2",
    "--set", "model.ffn_hidden=32",
    "--set", "model.max_positions=128",
    "--set", "model.tag_layer=1",
    "--set", "pretrain.batch_size=16",
    "--set", "pretrain.epochs=2",
    "--set", "pretrain.warmup_steps=4",
    "--set", "pretrain.peak_lr=1e-3",
];

/// gen -> vocabularies -> prep, returning the prep directory.
fn prepared(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus.jsonl");
    ok(&["gen", "--seed", "3", "--n", "200", "--out", &s(&corpus)]);
    ok(&["build-vocab", "--input", &s(&corpus), "--out", &s(&dir.join("vocab.txt")), "--size", "100"]);
    ok(&["build-typevocab", "--input", &s(&corpus), "--out", &s(&dir.join("types.txt"))]);
    let prep = dir.join("prep");
    ok(&[
        "prep", "--input", &s(&corpus), "--out", &s(&prep),
        "--vocab", &s(&dir.join("vocab.txt")), "--types", &s(&dir.join("types.txt")),
        "--set", "corpus.heldout=20",
    ]);
    prep
}

#[test]
fn gen_is_seeded_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    ok(&["gen", "--seed", "5", "--n", "50", "--out", &s(&a), "--grammar-out", &s(&dir.path().join("g.json"))]);
    ok(&["gen", "--seed", "5", "--n", "50", "--out", &s(&b)]);
    ok(&["gen", "--seed", "6", "--n", "50", "--out", &s(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 50);
    let echo = fs::read_to_string(dir.path().join("a.jsonl.config")).unwrap();
    let config = RunConfig::resolve(Some(&echo), &[]).unwrap();
    assert_eq!(config.seed().unwrap(), 5);
    let grammar: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(grammar["types"].as_array().unwrap().len(), 12);
}

#[test]
fn tsv_output_matches_jsonl_content() {
    let dir = tempfile::tempdir().unwrap();
    let (j, t) = (dir.path().join("c.jsonl"), dir.path().join("c.tsv"));
    ok(&["gen", "--seed", "2", "--n", "20", "--out", &s(&j)]);
    ok(&["gen", "--seed", "2", "--n", "20", "--out", &s(&t), "--format", "tsv"]);
    let read = |p: &Path, f| tagbert::io::ingest(fs::read(p).unwrap().as_slice(), f).unwrap().sentences;
    assert_eq!(read(&j, tagbert::io::Format::Jsonl), read(&t, tagbert::io::Format::Tsv));
}

#[test]
fn typevocab_reports_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    ok(&["gen", "--seed", "1", "--n", "300", "--out", &s(&corpus)]);
    let out = ok(&["build-typevocab", "--input", &s(&corpus), "--out", &s(&dir.path().join("t.txt"))]);
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(report["achieved"].as_f64().unwrap() >= 0.95, "{report}");
    let types = fs::read_to_string(dir.path().join("t.txt")).unwrap();
    assert!(types.starts_with("[PAD]\n[UNK]\n"));
}

#[test]
fn unknown_keys_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--n", "3", "--out", &s(&dir.path().join("x")), "--set", "model.hiden=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.hiden"));
    assert!(!run(&["inspect", &s(&dir.path().join("nope"))]).status.success());
}

#[test]
fn prep_writes_shards_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path());
    for f in ["config.resolved", "stats.json", "rejected.txt", "corpus.jsonl", "vocab.txt", "types.txt", "train.shard", "heldout.shard"] {
        assert!(prep.join(f).exists(), "missing {f}");
    }
    let (h, held) = tagbert::shard::read_shard(fs::File::open(prep.join("heldout.shard")).unwrap()).unwrap();
    assert_eq!((h.sentences, held.len()), (20, 20));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(prep.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["read"], 200);
}

#[test]
fn pretrain_inspect_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path());
    let run_dir = dir.path().join("run");
    let (prep_s, run_s) = (s(&prep), s(&run_dir));
    let mut args = vec!["pretrain", "--seed", "4", "--data", &prep_s, "--out", &run_s];
    args.extend_from_slice(TINY);
    ok(&args);
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(prep.join("stats.json")).unwrap()).unwrap();
    let steps = (stats["kept"].as_u64().unwrap() - 20).div_ceil(16) * 2;
    assert_eq!(metrics.lines().count() as u64, steps);
    let evals = fs::read_to_string(run_dir.join("eval.jsonl")).unwrap();
    assert_eq!(evals.lines().count(), 2);

    let final_ckpt = run_dir.join("checkpoints/final");
    let text = ok(&["inspect", &s(&final_ckpt)]);
    assert!(text.contains("(agrees)"), "{text}");
    assert!(text.contains(&format!("resume point     step {steps} epoch 2 batch 0")), "{text}");

    let report = ok(&["eval", "--checkpoint", &s(&final_ckpt), "--data", &s(&prep)]);
    let report: serde_json::Value = serde_json::from_str(report.trim()).unwrap();
    let acc = report["tag_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // resume from epoch 1 rewrites the same stream and final weights
    let before_params = fs::read(final_ckpt.join("params.bin")).unwrap();
    let resume = s(&run_dir.join("checkpoints/epoch-001"));
    args.extend_from_slice(&["--resume", &resume]);
    ok(&args);
    assert_eq!(fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(fs::read_to_string(run_dir.join("eval.jsonl")).unwrap(), evals);
    assert_eq!(fs::read(final_ckpt.join("params.bin")).unwrap(), before_params);
}

fn conll(path: &Path, rows: &[&[(&str, &str)]]) {
    let mut text = String::new();
    for r in rows {
        for (w, t) in *r {
            text.push_str(&format!("{w}\t{t}\n"));
        }
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn finetune_writes_three_seed_report() {
    let dir = tempfile::tempdir().unwrap();
    let prep = prepared(dir.path());
    let run_dir = dir.path().join("run");
    let (prep_s, run_s) = (s(&prep), s(&run_dir));
    let mut args = vec!["pretrain", "--seed", "4", "--data", &prep_s, "--out", &run_s];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "pretrain.epochs=1"]);
    ok(&args);
    // word forms from the generated corpus, tagged with a two-entity IOB scheme
    let corpus = tagbert::io::ingest(fs::read(prep.join("corpus.jsonl")).unwrap().as_slice(), tagbert::io::Format::Jsonl).unwrap();
    let words: Vec<&str> = corpus.sentences.iter().flat_map(|x| x.words().iter().map(String::as_str)).take(6).collect();
    let rows: Vec<Vec<(&str, &str)>> = (0..8)
        .map(|i| vec![(words[i % 6], "B-PER"), (words[(i + 1) % 6], "I-PER"), (words[(i + 2) % 6], "O"), (words[(i + 3) % 6], "B-LOC")])
        .collect();
    let rows: Vec<&[(&str, &str)]> = rows.iter().map(Vec::as_slice).collect();
    for name in ["train.tsv", "valid.tsv", "test.tsv"] {
        conll(&dir.path().join(name), &rows);
    }
    let out = dir.path().join("ft");
    ok(&[
        "finetune",
        "--checkpoint", &s(&run_dir.join("checkpoints/final")),
        "--vocab", &s(&prep.join("vocab.txt")),
        "--train", &s(&dir.path().join("train.tsv")),
        "--validation", &s(&dir.path().join("valid.tsv")),
        "--test", &s(&dir.path().join("test.tsv")),
        "--scheme", "iob",
        "--out", &s(&out),
        "--set", "finetune.max_epochs=2",
        "--set", "finetune.lr=1e-3",
        "--set", "finetune.selection_metric=span_f1",
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    let f1s: Vec<f64> = runs.iter().map(|r| r["test"]["f1"].as_f64().unwrap()).collect();
    let mean = report["mean_test_f1"].as_f64().unwrap();
    assert!((mean - f1s.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(fs::read_to_string(out.join("epochs.jsonl")).unwrap().lines().count(), 6);
    for seed in [1, 2, 3] {
        let text = ok(&["inspect", &s(&out.join(format!("seed-{seed}")))]);
        // a 4-label head on d=16
        assert!(text.contains("other            68\n"), "{text}");
        assert!(text.contains("(agrees)"), "{text}");
    }
}
