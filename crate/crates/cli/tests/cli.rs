use std::path::Path;
use std::process::{Command, Output};

fn diam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diam"))
        .args(args)
        .env_remove("DIAM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn gen_small(dir: &Path, seed: &str) {
    let o = diam(&[
        "gen-synth",
        "--out",
        dir.to_str().unwrap(),
        "--normal",
        "60",
        "--illicit",
        "20",
        "--seed",
        seed,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "4");
    gen_small(&b, "4");
    for f in ["nodes.csv", "edges.csv", "labels.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&diam(&["gen-synth"])), 1);
    assert_eq!(code(&diam(&["no-such-command"])), 1);
    assert_eq!(code(&diam(&["--help"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "1");
    let o = diam(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = diam(&["ingest-check", "--data", tmp.path().join("absent").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn data_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    gen_small(tmp.path(), "2");
    let o = Command::new(env!("CARGO_BIN_EXE_diam"))
        .arg("ingest-check")
        .env("DIAM_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("nodes           80"));
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let ok = diam(&["gradcheck", "--coords", "5"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let strict = diam(&["gradcheck", "--coords", "5", "--tolerance", "1e-12"]);
    assert_eq!(code(&strict), 3);
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn train_evaluate_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen_small(&data, "3");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    let o = diam(&["train", "--data", d, "--out", r, "--epochs", "2", "--hidden", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,loss,val_precision,val_recall,val_f1,val_auc,seconds"));

    let ckpt = run.join("checkpoint.json");
    let c = ckpt.to_str().unwrap();
    let o = diam(&["evaluate", "--data", d, "--checkpoint", c, "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("eval_test.csv").exists());

    let o = diam(&["predict", "--data", d, "--checkpoint", c, "--nodes", "0,5,5"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "node,probability");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[2], rows[3]);

    std::fs::write(&ckpt, "{ not json").unwrap();
    let o = diam(&["predict", "--data", d, "--checkpoint", c]);
    assert_eq!(code(&o), 2);
}
