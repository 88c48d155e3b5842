use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_train = 64
data.n_eval = 32
trainer.pretrain_epochs = 1
trainer.epochs = 3
trainer.retrain_epochs = 1
trainer.batch_size = 16
";

fn ofb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofb"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("OFB_THREADS")
        .output()
        .expect("spawn ofb")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn search_retrain_eval_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path();

    let s = ofb(out, &["--config", &cfg, "search"]);
    let code = s.status.code().unwrap();
    assert!(code == 0 || code == 2, "search exit {code}: {}", text(&s));
    for f in [
        "config.resolved",
        "search_log.jsonl",
        "prune_events.jsonl",
        "architecture.json",
        "supernet.json",
        "supernet.bin",
        "pretrained.json",
        "metrics.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["tau"], 0.5);
    assert_eq!(code == 0, metrics["status"] == "success", "{metrics}");

    let r = ofb(out, &["--config", &cfg, "retrain"]);
    assert_eq!(r.status.code(), Some(0), "{}", text(&r));
    assert!(out.join("retrained.json").exists() && out.join("retrain_metrics.json").exists());

    let e = ofb(out, &["--config", &cfg, "eval"]);
    assert_eq!(e.status.code(), Some(0), "{}", text(&e));
    assert!(text(&e).contains("retrained"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval_metrics.json")).unwrap()).unwrap();
    let acc = report["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let p = ofb(out, &["plotdata"]);
    assert_eq!(p.status.code(), Some(0), "{}", text(&p));
    let traj = std::fs::read_to_string(out.join("plots/trajectories.csv")).unwrap();
    assert!(traj.starts_with("epoch,submodule_id,site,rank,s,v,m\n"));
    let curves = std::fs::read_to_string(out.join("plots/curves.csv")).unwrap();
    let iters = std::fs::read_to_string(out.join("search_log.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"type\":\"iteration\""))
        .count();
    assert_eq!(curves.lines().count(), iters + 1);
    let kept = std::fs::read_to_string(out.join("plots/kept_dims.csv")).unwrap();
    assert_eq!(kept.lines().count(), 8, "{kept}");
}

#[test]
fn plotdata_tolerates_truncated_log() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"type":"epoch","epoch":0,"t":4,"lambda":0.5,"submodules":[]}"#;
    std::fs::write(dir.path().join("search_log.jsonl"), format!("{good}\n{{\"type\":\"iter")).unwrap();
    let p = ofb(dir.path(), &["plotdata"]);
    assert_eq!(p.status.code(), Some(0), "{}", text(&p));
    assert!(text(&p).contains("truncated"));
}

#[test]
fn baseline_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ofb(dir.path(), &["--config", &cfg, "--tau", "0.6", "baseline"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("baseline/baseline_metrics.json")).unwrap()).unwrap();
    let f = r["flops_fraction"].as_f64().unwrap();
    assert!(f > 0.0 && f <= 1.0);
    assert_eq!(r["cost"]["flops_fraction"], r["flops_fraction"]);
}

#[test]
fn invalid_config_exits_one_and_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    std::fs::write(&p, "trainer.tua = 0.3\n").unwrap();
    let o = ofb(dir.path(), &["--config", p.to_str().unwrap(), "search"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("trainer.tua"), "{}", text(&o));

    let o = ofb(dir.path(), &["--tau", "1.5", "search"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("trainer.tau"), "{}", text(&o));
}

#[test]
fn thread_count_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ofb"))
        .args(["--out", dir.path().to_str().unwrap(), "theorems"])
        .env("OFB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("OFB_THREADS"));
}

#[test]
fn theorems_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = ofb(dir.path(), &["theorems", "--samples", "1000", "--dims", "2,4,8,16"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("theorems.json")).unwrap()).unwrap();
    assert_eq!(r["violations"].as_array().unwrap().len(), 0);
    let o = ofb(dir.path(), &["theorems", "--samples", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_detects_corrupted_rules() {
    let dir = tempfile::tempdir().unwrap();
    let o = ofb(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(!text(&o).contains("FAIL"));
    for prim in ["Softmax", "LayerNorm"] {
        let o = ofb(dir.path(), &["gradcheck", "--corrupt", prim]);
        assert_eq!(o.status.code(), Some(1), "{prim}");
        assert!(text(&o).contains("FAIL"), "{prim}");
    }
    let o = ofb(dir.path(), &["gradcheck", "--corrupt", "NotAPrimitive"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gendata_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ofb(dir.path(), &["--config", &cfg, "gendata"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let bytes = std::fs::metadata(dir.path().join("data/train_images.bin")).unwrap().len();
    assert_eq!(bytes, 64 * 3 * 32 * 32 * 8);
    let labels = std::fs::metadata(dir.path().join("data/eval_labels.bin")).unwrap().len();
    assert_eq!(labels, 32 * 8);
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ofb(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).starts_with("error:"));
}
