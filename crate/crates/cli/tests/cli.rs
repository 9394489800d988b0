use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chunkstack"));
    c.env_remove("CHUNKSTACK_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn synth_small(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n-train",
        "24",
        "--n-test",
        "6",
        "--vocab-size",
        "30",
        "--doc-len",
        "40",
        "--doc-jitter",
        "4",
        "--signal-offset",
        "20",
        "--first-chunk",
        "20",
        "--trigger-repeats",
        "2",
        "--seed",
        "3",
    ]);
}

const TINY: &[&str] = &[
    "--hidden",
    "8",
    "--heads",
    "2",
    "--layers",
    "1",
    "--ff-inner",
    "16",
    "--chunk-layers",
    "1",
    "--chunk-heads",
    "2",
    "--chunk-ff-inner",
    "16",
    "--content-len",
    "10",
    "--max-chunks",
    "6",
    "--epochs",
    "2",
    "--batch-size",
    "4",
    "--grad-accum-steps",
    "1",
    "--warmup-steps",
    "2",
    "--lr",
    "1e-3",
];

fn train_tiny(data: &Path, out: &Path) -> String {
    let train = data.join("train.jsonl");
    let mut args = vec!["train", "--train", train.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args)
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let out = ok(&["gradcheck", "--dtype", "f64", "--tiny"]);
    let last = out.lines().last().unwrap();
    let err: f64 = last
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("max_rel_err="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err <= 1e-4, "{out}");
    assert_eq!(out.lines().filter(|l| l.ends_with(" pass")).count(), 10);
}

#[test]
fn gradcheck_refuses_f32() {
    let o = run(&["gradcheck", "--dtype", "f32", "--tiny"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn finetune_preset_echoes_published_settings() {
    let out = ok(&["train", "--preset", "finetune", "--train", "unused.jsonl", "--out", "unused", "--dry-run"]);
    for part in ["lr=3e-5", "grad_accum_steps=2", "warmup_steps=150", "batch_size=16", "epochs=40"] {
        assert!(out.contains(part), "{out}");
    }
    let out = ok(&["train", "--preset", "frozen", "--train", "x", "--out", "y", "--dry-run"]);
    for part in ["batch_size=32", "epochs=20", "warmup_steps=40", "mode=frozen", "word_pool=wsum"] {
        assert!(out.contains(part), "{out}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 3\naggregator = lstm\n").unwrap();
    let out = ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--train",
        "x",
        "--out",
        "y",
        "--dry-run",
    ]);
    assert!(out.contains("epochs=1"), "{out}");
    assert!(out.contains("aggregator=lstm"), "{out}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--aggregator", "gru", "--train", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_one_json_line() {
    let o = run(&["eval", "--run", "/nonexistent/run", "--data", "/nonexistent/d.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("model.json"));
}

#[test]
fn malformed_corpus_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"text\":\"x\",\"label\":0}\nnot json\n").unwrap();
    let o = run(&["vocab-build", "--corpus", bad.to_str().unwrap(), "--out", dir.path().join("v").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.jsonl:2"), "{}", stderr(&o));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data);
    for f in ["train.jsonl", "test.jsonl", "spec.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let vocab = dir.path().join("vocab.txt");
    let v = ok(&["vocab-build", "--corpus", data.join("train.jsonl").to_str().unwrap(), "--size", "100", "--out", vocab.to_str().unwrap()]);
    assert!(v.contains("vocab_size=35"), "{v}");

    let run_dir = dir.path().join("run");
    let out = train_tiny(&data, &run_dir);
    assert!(out.contains("trained steps=12"), "{out}");
    for f in ["model.ckpt", "model.json", "vocab.txt", "train_log.tsv", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 13);
    assert!(log.starts_with("step\tepoch\tlr\tloss\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["inputs"][0]["blob_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(manifest["settings"]["epochs"], "2");

    let test = data.join("test.jsonl");
    let line = ok(&["eval", "--run", run_dir.to_str().unwrap(), "--data", test.to_str().unwrap()]);
    assert_eq!(line.lines().count(), 1);
    let report: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report["n_examples"], 6);
    let total: u64 = report["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 6);
    let text = ok(&["eval", "--run", run_dir.to_str().unwrap(), "--data", test.to_str().unwrap(), "--text"]);
    assert!(text.contains("macro_f1 = "));

    let one = dir.path().join("one.jsonl");
    let first = fs::read_to_string(&test).unwrap().lines().next().unwrap().to_string();
    fs::write(&one, first + "\n").unwrap();
    let pred = ok(&["predict", "--run", run_dir.to_str().unwrap(), "--data", one.to_str().unwrap()]);
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines.len(), 1);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0], "test-000000");
    assert!(fields[1] == "0" || fields[1] == "1");
    let probs: Vec<f64> = fields[2].split(',').map(|p| p.parse().unwrap()).collect();
    assert_eq!(probs.len(), 2);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train_tiny(&data, &a);
    train_tiny(&data, &b);
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("train_log.tsv")).unwrap(), fs::read(b.join("train_log.tsv")).unwrap());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(&dir.path().join("a"));
    synth_small(&dir.path().join("b"));
    for f in ["train.jsonl", "test.jsonl", "spec.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn baselines_print_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data);
    let train = data.join("train.jsonl");
    let test = data.join("test.jsonl");
    let bow = ok(&["baseline", "--kind", "bow", "--train", train.to_str().unwrap(), "--test", test.to_str().unwrap()]);
    let r: serde_json::Value = serde_json::from_str(bow.trim()).unwrap();
    assert_eq!(r["n_examples"], 6);
    let mut args = vec!["baseline", "--kind", "truncation", "--train", train.to_str().unwrap(), "--test", test.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let trunc = ok(&args);
    let r: serde_json::Value = serde_json::from_str(trunc.trim()).unwrap();
    assert_eq!(r["n_examples"], 6);
}
