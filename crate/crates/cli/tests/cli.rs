use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deferbench::data::read_dfd;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
seed = 3
[dataset]
source = "synthetic"
n_samples = 1500
positive_fraction = 0.1
[dataset.geometry]
kind = "blobs"
dim = 6
[model]
hidden_dims = [12]
n_samples = 4
[model.sgd]
epochs = 3
[sweep]
methods = ["softmax"]
seeds = [0, 1]
conditions = ["id"]
"#;

fn deferbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deferbench")).args(args).output().unwrap()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn generate_default_summary_and_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = deferbench(&["generate", "--out", d.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let data = read_dfd(&a.path().join("dataset.dfd")).unwrap();
    let positives = data.labels().iter().filter(|&&y| y == 1).count();
    let prevalence = 100.0 * positives as f64 / data.labels().len() as f64;
    assert!((prevalence - 3.0).abs() < 0.05);
    let summary = fs::read_to_string(a.path().join("summary.txt")).unwrap();
    assert!(summary.contains(&format!("prevalence: {prevalence:.2}%")), "{summary}");
    assert!(summary.contains("split test: 1000 samples"));
    assert_eq!(sha(&a.path().join("dataset.dfd")), sha(&b.path().join("dataset.dfd")));

    let c = tempfile::tempdir().unwrap();
    deferbench(&["generate", "--seed", "9", "--out", c.path().to_str().unwrap()]);
    assert_ne!(sha(&a.path().join("dataset.dfd")), sha(&c.path().join("dataset.dfd")));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(deferbench(&["generate", "--out", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(deferbench(&["generate"]).status.code(), Some(2));
    assert_eq!(deferbench(&["frobnicate"]).status.code(), Some(2));
    let bad = write_config(dir.path(), "seed = 1\nunknown_key = 3\n");
    let out = deferbench(&["generate", "--config", &bad, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
    let invalid = write_config(dir.path(), "[dataset]\nsource = \"synthetic\"\npositive_fraction = 1.5\n");
    assert_eq!(deferbench(&["generate", "--config", &invalid, "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(deferbench(&["run", "--jobs", "0", "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn run_softmax_rows_rerun_and_artifacts() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = write_config(cfg_dir.path(), SMALL);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = deferbench(&["run", "--config", &cfg, "--jobs", "2", "--out", d.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read_to_string(a.path().join("results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    for seed in ["0", "1"] {
        let n = rows.iter().filter(|r| r.split(',').nth(3) == Some(seed)).count();
        assert_eq!(n, 200);
    }
    assert_eq!(rows.len(), 400);
    assert_eq!(sha(&a.path().join("results.csv")), sha(&b.path().join("results.csv")));
    assert_eq!(sha(&a.path().join("classification.csv")), sha(&b.path().join("classification.csv")));

    // The echoed config reproduces the run on its own.
    let echoed = a.path().join("resolved_config.toml");
    let c = tempfile::tempdir().unwrap();
    let out = deferbench(&["run", "--config", echoed.to_str().unwrap(), "--out", c.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(sha(&a.path().join("results.csv")), sha(&c.path().join("results.csv")));

    let bundle = a.path().join("models/seed_1/softmax");
    let out = deferbench(&["inspect", bundle.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("method: softmax"));
    let out = deferbench(&["inspect", bundle.join("model.dfb").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("parameters: "));

    let out = deferbench(&["report", a.path().join("results.csv").to_str().unwrap(), "--out", a.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let svg = fs::read_to_string(a.path().join("id_0.svg")).unwrap();
    assert_eq!(svg.matches(r#"<polyline class="curve" data-method="softmax""#).count(), 4);
}

#[test]
fn failed_training_exits_one_with_failed_rows() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg = write_config(cfg_dir.path(), &SMALL.replace("epochs = 3", "epochs = 3\nlearning_rate = 1e12"));
    let out_dir = tempfile::tempdir().unwrap();
    let out = deferbench(&["run", "--config", &cfg, "--out", out_dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = fs::read_to_string(out_dir.path().join("results.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",failed")));
    assert!(!fs::read_to_string(out_dir.path().join("notes.txt")).unwrap().is_empty());
}

#[test]
fn report_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let header = "method,condition,level,seed,param_kind,param_value,deferral_rate,bacc,auc,pauc,acc0,acc1,frac_pos_deferred,status\n";
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, header).unwrap();
    let out = deferbench(&["report", empty.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, format!("{header}softmax,id,0,0,threshold,0.5,0.1,0.9,0.9,0.5,0.9,0.9,0.1,ok\nsoftmax,id,x,0,threshold,0.5,0.1,0.9,0.9,0.5,0.9,0.9,0.1,ok\n")).unwrap();
    let out = deferbench(&["report", bad.to_str().unwrap(), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn corrupt_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    deferbench(&["generate", "--out", d]);
    let input = dir.path().join("dataset.dfd");
    let out = deferbench(&["corrupt", input.to_str().unwrap(), "--kind", "noise", "--level", "0", "--out", d]);
    assert_eq!(out.status.code(), Some(0));
    let original = read_dfd(&input).unwrap();
    let same = read_dfd(&dir.path().join("corrupted.dfd")).unwrap();
    assert_eq!(original.features(), same.features());
    let out = deferbench(&["corrupt", input.to_str().unwrap(), "--kind", "blur", "--level", "4", "--out", d]);
    assert_eq!(out.status.code(), Some(0));
    let blurred = read_dfd(&dir.path().join("corrupted.dfd")).unwrap();
    assert_ne!(original.features(), blurred.features());
    assert_eq!(original.labels(), blurred.labels());
    let out = deferbench(&["corrupt", input.to_str().unwrap(), "--kind", "noise", "--level", "6", "--out", d]);
    assert_eq!(out.status.code(), Some(2));
}
