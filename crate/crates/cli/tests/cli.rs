use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cobformer");

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(cwd).args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 8] = ["--data", "synth", "--n", "200", "--classes", "3", "--parts", "6"];

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--epochs", "many"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["partition", "--data", "edge-list", "--edges", "e", "--labels", "l", "--features", "nope.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = run(dir.path(), &["train", "--attention", "sparse"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["train", "--config", "missing.json"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    let out = run(dir.path(), &["train", "--data", "cora", "--cora-dir", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_files_feed_back_into_partition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["synth", "--out", "g", "--rho", "0.8"];
    args.extend(SMALL);
    assert!(run(d, &args).status.success());
    for f in ["edges.tsv", "labels.tsv", "features.txt", "masks.tsv", "synth_stats.json", "manifest.json"] {
        assert!(d.join("g").join(f).exists(), "{f}");
    }
    let stats = read_json(&d.join("g/synth_stats.json"));
    assert!((stats["measured_rho"].as_f64().unwrap() - 0.8).abs() < 0.05);
    let out = run(
        d,
        &[
            "partition", "--out", "p", "--data", "edge-list", "--edges", "g/edges.tsv", "--labels", "g/labels.tsv",
            "--features", "g/features.txt", "--masks", "g/masks.tsv", "--parts", "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("P=5 cut="), "{stdout}");
    let text = fs::read_to_string(d.join("p/partition.txt")).unwrap();
    assert!(text.starts_with("CBP1 N=200 P=5 "));
    assert_eq!(text.lines().count(), 201);
    assert!(text.lines().nth(1).unwrap().starts_with("0\t"));
}

#[test]
fn flags_override_the_config_file_and_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), r#"{"seed": 4, "train": {"max_epochs": 9}, "model": {"hidden": 8, "gcn_hidden": 8}}"#).unwrap();
    let mut args = vec!["train", "--config", "c.json", "--out", "t", "--epochs", "2"];
    args.extend(SMALL);
    let out = run(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(&d.join("t/manifest.json"));
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["train"]["max_epochs"], 2);
    assert_eq!(m["config"]["train"]["seed"], 4);
    assert_eq!(m["config"]["model"]["hidden"], 8);
    assert_eq!(m["formats"]["checkpoint"], "CBT1");
    assert_eq!(fs::read_to_string(d.join("t/metrics.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn train_then_analyze_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--out", "t", "--epochs", "3", "--hidden", "8"];
    args.extend(SMALL);
    assert!(run(d, &args).status.success());
    let mut args = vec!["analyze", "--out", "a", "--hidden", "8", "--checkpoint", "t/checkpoint.cbt", "--dump-attention", "--k-max", "3"];
    args.extend(SMALL);
    let out = run(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cost = fs::read_to_string(d.join("a/cost.txt")).unwrap();
    let field = |k: &str| cost.lines().find_map(|l| l.strip_prefix(k)).unwrap().to_string();
    assert_eq!(field("counter="), field("bound="));
    let attnk = fs::read_to_string(d.join("a/attnk.csv")).unwrap();
    let total: f64 = attnk.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(fs::read_to_string(d.join("a/attn_layer0.txt")).unwrap().starts_with("BGA P=6 layer=0"));
    // A checkpoint from a different width does not fit.
    let mut args = vec!["analyze", "--out", "b", "--hidden", "16", "--checkpoint", "t/checkpoint.cbt"];
    args.extend(SMALL);
    assert_eq!(run(d, &args).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--out", "g"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let g = read_json(&dir.path().join("g/gradcheck.json"));
    assert!(g["max_relative_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(g["pass"], true);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn identical_runs_write_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["train", "--out", "o", "--epochs", "3", "--hidden", "8", "--seed", "7"];
    args.extend(SMALL);
    for d in [a.path(), b.path()] {
        assert!(run(d, &args).status.success());
    }
    assert_eq!(tree(&a.path().join("o")), tree(&b.path().join("o")));
}
