use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}

fn vitsom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitsom"))
        .args(args)
        .env_remove("VITSOM_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, task: &str, extra: &str) -> PathBuf {
    let text = format!(
        "task = \"{task}\"\n\
         [data]\ndataset = \"mnist\"\nroot = \"{}\"\ntrain_samples = 64\ntest_samples = 40\n\
         [model]\npatch_size = 7\nembed_dim = 8\nmlp_dim = 16\nencoder_depth = 1\ndecoder_depth = 1\nnum_heads = 2\n\
         [som]\nheight = 3\nwidth = 4\n\
         [optim]\nsteps = 4\nbatch_size = 16\n\
         [eval]\ninterval = 2\n{extra}",
        data_root().display()
    );
    let path = dir.join(format!("{task}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn trained(dir: &Path, task: &str) -> PathBuf {
    let cfg = tiny_config(dir, task, "");
    let out = dir.join(format!("run-{task}"));
    let o = vitsom(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn train_writes_manifest_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), "clustering");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("step,l_nn,l_som,l_total,purity"));
    assert!(out.join("checkpoint.bin").exists());
    assert!(out.join("config.toml").exists());
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "clustering", "bogus_key = 1\n");
    let o = vitsom(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "clustering", "");
    let o = vitsom(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--dataset-root",
        dir.path().join("nowhere").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("x/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}

#[test]
fn eval_prints_table_and_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), "clustering");
    let ck = out.join("checkpoint.bin");
    let o = vitsom(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("purity") && text.contains("topographic_error"));

    let o = vitsom(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--json",
        "--samples",
        "20",
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["samples"], 20);
    assert_eq!(v["step"], 4);
    assert!(v["purity"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_rejects_corrupt_checkpoint_and_wrong_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"VITSOMC1garbage").unwrap();
    assert_eq!(code(&vitsom(&["eval", "--checkpoint", bad.to_str().unwrap()])), 5);

    let out = trained(dir.path(), "clustering");
    let ck = out.join("checkpoint.bin");
    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&vitsom(&["eval", "--checkpoint", bad.to_str().unwrap()])), 5);

    let o = vitsom(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", "cifar10"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cifar10"));
}

#[test]
fn export_renders_clustering_and_refuses_classification() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), "clustering");
    let exp = dir.path().join("export");
    let o = vitsom(&[
        "export-prototypes",
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        exp.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pgm = fs::read(exp.join("prototypes.pgm")).unwrap();
    // 3×4 tiles of 28×28 with 1-pixel gaps
    let header = b"P5\n115 86\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 115 * 86);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp.join("prototypes.json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([12, 128]));
    assert_eq!(fs::metadata(exp.join("prototypes.bin")).unwrap().len(), 12 * 128 * 8);

    let out = trained(dir.path(), "classification");
    let exp = dir.path().join("export-cls");
    let o = vitsom(&[
        "export-prototypes",
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
        "--out",
        exp.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("no decoder"), "{}", stderr(&o));
    assert!(exp.join("prototypes.bin").exists());
}

#[test]
fn verify_passes_and_reports_injected_violations() {
    let o = vitsom(&["verify", "--suite", "schedules"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("PASS schedules"));

    let o = vitsom(&["verify", "--suite", "som", "--json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = vitsom(&["verify", "--suite", "equivalence", "--inject-violation"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("FAIL equivalence"));
    assert!(stderr(&o).contains("first failing case"));

    assert_eq!(code(&vitsom(&["verify", "--suite", "nonsense"])), 2);
}

#[test]
fn bench_bmu_reports_agreement() {
    let o = vitsom(&[
        "bench-bmu",
        "--height",
        "8",
        "--width",
        "8",
        "--dim",
        "32",
        "--batch",
        "64",
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mismatches"], 0);
    assert!(v["speedup"].as_f64().unwrap() > 0.0);
}
