use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dpdcan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpdcan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dpdcan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "expected one line: {text}");
    serde_json::from_str(&text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, cells: usize, genes: usize, seed: u64) {
    ok(&[
        "synth",
        "--cells",
        &cells.to_string(),
        "--genes",
        &genes.to_string(),
        "--clusters",
        "3",
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
}

#[test]
fn synth_writes_two_tables_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 300, 200, 1);
    synth(&b, 300, 200, 1);
    for name in ["counts.csv", "labels.csv"] {
        let text = fs::read_to_string(a.join(name)).unwrap();
        assert_eq!(text.lines().count(), 301, "{name}");
        assert_eq!(text, fs::read_to_string(b.join(name)).unwrap());
    }
    let header = fs::read_to_string(a.join("counts.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 201);
}

#[test]
fn synth_rejects_a_single_cluster() {
    let tmp = TempDir::new().unwrap();
    let out = dpdcan(&["synth", "--clusters", "1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn account_matches_the_gaussian_mechanism_grid_minimum() {
    let out = ok(&["account", "--q", "1.0", "--sigma", "2.0", "--steps", "10", "--delta", "1e-5"]);
    let v = stdout_json(&out);
    let (sigma, steps, delta): (f64, f64, f64) = (2.0, 10.0, 1e-5);
    let oracle = dpdcan::accountant::default_orders()
        .into_iter()
        .map(|a| {
            let a = a as f64;
            let r = steps * a / (2.0 * sigma * sigma);
            r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0)
        })
        .fold(f64::INFINITY, f64::min);
    let eps = v["epsilon"].as_f64().unwrap();
    assert!((eps - oracle).abs() < 1e-9, "{eps} vs {oracle}");
}

#[test]
fn calibrate_round_trips_through_account() {
    let v = stdout_json(&ok(&["calibrate", "--epsilon", "6", "--q", "0.1", "--steps", "2000"]));
    let sigma = v["sigma"].as_f64().unwrap();
    let w = stdout_json(&ok(&["account", "--q", "0.1", "--sigma", &sigma.to_string(), "--steps", "2000"]));
    let eps = w["epsilon"].as_f64().unwrap();
    assert!(eps <= 6.0 && 6.0 - eps < 1e-3);
}

#[test]
fn unreachable_epsilon_is_a_calibration_failure() {
    let out = dpdcan(&["calibrate", "--epsilon", "1e-4", "--q", "1", "--steps", "100000"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn evaluate_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 60, 20, 3);
    let labels = tmp.path().join("labels.csv");
    let v = stdout_json(&ok(&["evaluate", "--labels", s(&labels), "--pred", s(&labels)]));
    assert_eq!(v["nmi"].as_f64(), Some(100.0));
    assert_eq!(v["ari"].as_f64(), Some(100.0));
}

#[test]
fn input_errors_exit_with_data_code() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.csv");
    let out = dpdcan(&["preprocess", "--input", s(&missing), "--out", s(&tmp.path().join("b.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "cell,g1,g2\nc1,1,x\n").unwrap();
    let out = dpdcan(&["preprocess", "--input", s(&bad), "--out", s(&tmp.path().join("b.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_requires_exactly_one_privacy_target() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 60, 20, 4);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "[data]\ninput = \"counts.csv\"\n[model]\nn_clusters = 3\n[privacy]\nepsilon = 8.0\nsigma = 2.0\n",
    )
    .unwrap();
    let out = dpdcan(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("privacy.epsilon"));

    fs::write(&cfg, "[model]\nn_clusters = 3\nunknown_key = 1\n").unwrap();
    let out = dpdcan(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dpdcan"))
        .args(["account", "--q", "0.1", "--sigma", "1", "--steps", "1"])
        .env("DPDCAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn manifest_rerun_reproduces_every_output() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), 120, 40, 5);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "[data]\ninput = \"counts.csv\"\nlabels = \"labels.csv\"\n\
         [model]\nn_clusters = 3\nhidden = [32, 16]\nlatent = 8\n\
         [privacy]\nsigma = 1.5\n[train]\nt1_epochs = 3\nt2_epochs = 3\n[seeds]\nbase = 7\n",
    )
    .unwrap();
    let first = tmp.path().join("first");
    ok(&["train", "--config", s(&cfg), "--out", s(&first)]);
    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("manifest.toml")), "--out", s(&second)]);

    let a = read_dir_sorted(&first);
    let b = read_dir_sorted(&second);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "assignments.csv",
            "centers.csv",
            "embeddings.csv",
            "encoder.json",
            "manifest.toml",
            "metrics.json",
            "privacy.json",
            "run.log"
        ]
    );
    assert_eq!(a, b);
}

#[test]
fn full_chain_on_the_synthetic_benchmark() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, 300, 200, 1);
    let bundle = dir.join("bundle.json");
    ok(&["preprocess", "--input", s(&dir.join("counts.csv")), "--out", s(&bundle)]);
    let run = dir.join("run");
    ok(&[
        "train",
        "--input",
        s(&bundle),
        "--clusters",
        "3",
        "--epsilon",
        "8",
        "--delta",
        "1e-5",
        "--seed",
        "1",
        "--out",
        s(&run),
    ]);

    let embeddings = fs::read_to_string(run.join("embeddings.csv")).unwrap();
    assert_eq!(embeddings.lines().count(), 301);
    assert_eq!(embeddings.lines().next().unwrap().split(',').count(), 33);
    let assignments = run.join("assignments.csv");
    assert_eq!(fs::read_to_string(&assignments).unwrap().lines().count(), 301);
    for name in ["encoder.json", "centers.csv", "run.log", "manifest.toml"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let checkpoint: Value = serde_json::from_str(&fs::read_to_string(run.join("encoder.json")).unwrap()).unwrap();
    let tensors = checkpoint["tensors"].as_object().unwrap();
    assert!(!tensors.is_empty() && tensors.keys().all(|k| k.starts_with("encoder.")));

    // the reported ε is reproducible from (q, σ, steps, δ)
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("privacy.json")).unwrap()).unwrap();
    let eps = report["epsilon"].as_f64().unwrap();
    assert!(eps <= 8.0);
    let q = report["sample_rate"].as_f64().unwrap().to_string();
    let sigma = report["sigma"].as_f64().unwrap().to_string();
    let steps = report["sgm_steps"].as_u64().unwrap().to_string();
    let offline = stdout_json(&ok(&["account", "--q", &q, "--sigma", &sigma, "--steps", &steps, "--delta", "1e-5"]));
    assert!((offline["epsilon"].as_f64().unwrap() - eps).abs() <= 1e-9);

    let metrics = stdout_json(&ok(&[
        "evaluate",
        "--labels",
        s(&dir.join("labels.csv")),
        "--pred",
        s(&assignments),
    ]));
    assert!(metrics["ari"].as_f64().unwrap() >= 60.0, "{metrics}");
}
