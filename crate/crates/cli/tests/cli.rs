use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slr")).args(args).output().expect("failed to run slr")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_small(dir: &Path, seed: &str) {
    let out = slr(&["gen", "--train", "2", "--test", "2", "--size", "10", "--sigma", "2", "--seed", seed, "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
}

fn summary_field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .to_string()
}

#[test]
fn gen_writes_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "7");
    gen_small(&b, "7");
    for name in ["train.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = |dir: &Path| {
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        m["config"].as_object_mut().unwrap().remove("out");
        m
    };
    assert_eq!(manifest(&a), manifest(&b));
    assert_eq!(manifest(&a)["config"]["seed"], "7");

    let c = tmp.path().join("c");
    gen_small(&c, "8");
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn gen_size_zero_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slr(&["gen", "--size", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_oracle_kind_lists_valid_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "1");
    let train = tmp.path().join("train.jsonl");
    let out = slr(&["train", "--train-data", train.to_str().unwrap(), "--unary", "bogus", "--out", tmp.path().join("m").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for kind in ["zero", "const", "linear", "boost", "mlp"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn missing_inputs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "1");
    let data = tmp.path().join("test.jsonl");
    let out = slr(&["predict", "--model", "/nonexistent/model.slr", "--data", data.to_str().unwrap(), "--out", tmp.path().join("p").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = slr(&["train", "--train-data", "/nonexistent/train.jsonl", "--out", tmp.path().join("m").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = slr(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_model_predicts_black_and_predict_matches_train_summary() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "3");
    let (train, test) = (tmp.path().join("train.jsonl"), tmp.path().join("test.jsonl"));

    for (kind, iters) in [("zero", "1"), ("boost", "2")] {
        let model_dir = tmp.path().join(format!("model_{kind}"));
        let out = slr(&[
            "train", "--train-data", train.to_str().unwrap(), "--test-data", test.to_str().unwrap(),
            "--unary", kind, "--pairwise", kind, "--iters", iters, "--mp-iters", "10",
            "--out", model_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let summary = stdout(&out).lines().last().unwrap().to_string();
        assert!(summary.starts_with(&format!("unary={kind} pairwise={kind} train=")), "{summary}");
        let curve = fs::read_to_string(model_dir.join("curve.csv")).unwrap();
        assert_eq!(curve.lines().next(), Some("iteration,train_error,test_error"));
        assert_eq!(curve.lines().count(), 1 + iters.parse::<usize>().unwrap());

        let pred_dir = tmp.path().join(format!("pred_{kind}"));
        let out = slr(&[
            "predict", "--model", model_dir.join("model.slr").to_str().unwrap(),
            "--data", test.to_str().unwrap(), "--out", pred_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let text = stdout(&out);
        let mean: f64 = text.lines().last().unwrap().strip_prefix("mean_error=").unwrap().parse().unwrap();
        let reported: f64 = summary_field(&summary, "test").parse().unwrap();
        assert!((mean - reported).abs() <= 1e-12, "{mean} vs {reported}");
        assert_eq!(text.lines().filter(|l| l.starts_with("example=")).count(), 2);

        if kind == "zero" {
            for k in 0..2 {
                let bytes = fs::read(pred_dir.join(format!("pred_{k:03}.pgm"))).unwrap();
                assert!(bytes.starts_with(b"P5"));
                assert!(bytes[bytes.len() - 100..].iter().all(|&b| b == 0));
            }
        }
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.cfg");
    fs::write(&cfg, "# small run\ntrain = 1\ntest = 1\nsize = 6\nsigma = 1.5\nseed = 2\n").unwrap();
    let out_dir = tmp.path().join("d");
    let out = slr(&["gen", "--config", cfg.to_str().unwrap(), "--size", "5", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["size"], "5");
    assert_eq!(manifest["config"]["sigma"], "1.5");
    let train = fs::read_to_string(out_dir.join("train.jsonl")).unwrap();
    assert!(train.contains("\"width\":5"));

    fs::write(&cfg, "sise = 5\n").unwrap();
    let out = slr(&["gen", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown key"));
}

#[test]
fn matrix_writes_table_in_heading_order() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "4");
    let out_dir = tmp.path().join("m");
    let out = slr(&[
        "matrix", "--train-data", tmp.path().join("train.jsonl").to_str().unwrap(),
        "--test-data", tmp.path().join("test.jsonl").to_str().unwrap(),
        "--iters", "1", "--mp-iters", "5", "--test-mp-iters", "20", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "unary\\pairwise,Zero,Const.,Linear,Boost.,MLP");
    assert_eq!(lines.len(), 6);
    for (line, head) in lines[1..].iter().zip(["Zero", "Const.", "Linear", "Boost.", "MLP"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], head);
        assert_eq!(cells.len(), 6);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok()));
    }
    assert_eq!(fs::read_to_string(out_dir.join("cells.csv")).unwrap().lines().count(), 26);
}
