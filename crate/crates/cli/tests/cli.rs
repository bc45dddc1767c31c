use std::path::Path;
use std::process::Command;

fn rdm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rdm"));
    c.env("RDM_THREADS", "1");
    c
}

const CONFIG: &str = r#"{
    "manifold": {"kind": "sphere", "dim": 2},
    "network": {"hidden_layers": 1, "hidden_width": 8},
    "train": {"learning_rate": 0.001, "steps": 3, "batch_size": 8, "seed": 0},
    "paths": {"horizon": 1.0, "n_steps": 5},
    "target": {"kind": "vmf-mixture", "components": [{"weight": 1.0, "mean": [0, 0, 1], "concentration": 2.0}]}
}"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path) -> std::path::PathBuf {
    let cfg = write_config(dir, CONFIG);
    let st = rdm().args(["train", "--seed", "4", "--config"]).arg(&cfg).arg("--out").arg(dir.join("run")).status().unwrap();
    assert!(st.success());
    dir.join("run/checkpoint.json")
}

#[test]
fn train_writes_checkpoint_and_headed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path());
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("# config_hash=") && lines[0].ends_with("seed=4"));
    assert_eq!(lines[1], "step\tloss\tloss_std\tlr\tproposal_variance");
    assert_eq!(lines.len(), 5);
}

#[test]
fn training_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(a.path());
    train(b.path());
    let read = |d: &Path| std::fs::read(d.join("run/metrics.tsv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn sample_zero_points_is_an_empty_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path());
    let out = dir.path().join("s.csv");
    let st = rdm().args(["sample", "--n", "0", "--seed", "1", "--checkpoint"]).arg(&ck).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().nth(1), Some("x0,x1,x2"));
}

#[test]
fn sample_and_eval_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path());
    let out = dir.path().join("s.csv");
    let st = rdm().args(["sample", "--n", "5", "--lambda", "0.5", "--seed", "1", "--checkpoint"]).arg(&ck).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 7);
    let cfg = dir.path().join("run.json");
    let o = rdm().args(["eval", "--ode", "--kelbo-k", "2", "--n-points", "3", "--checkpoint"]).arg(&ck).arg("--config").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("nll_kelbo_2") && text.contains("nll_ode"));
}

#[test]
fn density_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path());
    let out = dir.path().join("d.csv");
    let st = rdm().args(["density", "--grid", "4x8", "--checkpoint"]).arg(&ck).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().nth(1), Some("x0,x1,x2,cell_volume,log_density"));
    assert_eq!(text.lines().count(), 2 + 32);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    // Missing --seed is a usage error.
    let cfg = write_config(dir.path(), CONFIG);
    let st = rdm().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
    // Unknown keys are configuration errors.
    let bad = write_config(dir.path(), &CONFIG.replace("\"paths\"", "\"extra\": 0, \"paths\""));
    let st = rdm().args(["train", "--seed", "1", "--config"]).arg(&bad).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
    // A missing file is an I/O error.
    let st = rdm().args(["sample", "--n", "1", "--seed", "1", "--checkpoint", "/nonexistent/ck.json", "--out"]).arg(dir.path().join("x.csv")).status().unwrap();
    assert_eq!(st.code(), Some(4));
    // λ > 1 is a domain error.
    let ck = train(dir.path());
    let st = rdm().args(["sample", "--n", "1", "--lambda", "2", "--seed", "1", "--checkpoint"]).arg(&ck).arg("--out").arg(dir.path().join("x.csv")).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn ablate_importance_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train(dir.path());
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("a.tsv");
    let st = rdm().args(["ablate", "--mode", "importance", "--draws", "20", "--n-points", "4", "--checkpoint"]).arg(&ck).arg("--config").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with("variance_ratio"));
    assert_eq!(text.lines().count(), 4);
}
