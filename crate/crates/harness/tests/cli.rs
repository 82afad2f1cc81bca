use std::path::Path;
use std::process::{Command, Output};

use fedsig_core::checkpoint;
use serde_json::Value;

fn fedsig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsig"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn csv_rows(path: &Path) -> (String, usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    (lines.next().unwrap().to_string(), lines.count())
}

// Desk preset trimmed further so every kind runs in a couple of seconds.
const QUICK: &[&str] = &["--preset", "desk", "--instances", "2", "--iterations", "2", "--local_epochs", "1", "--centralized.epochs", "3"];

fn run_quick(kind: &str, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![kind, "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    let result = fedsig(&args);
    assert!(
        result.status.success(),
        "{kind} failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let status: Value = serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(status["status"], "ok");
    serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn help_lists_every_field_and_exits_zero() {
    let out = fedsig(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--preset", "--out", "--seed", "--federated.local_epochs", "--model.kernel_size", "--instances"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn failures_report_json_and_nonzero_status() {
    let bad_kind = fedsig(&["not-a-kind"]);
    assert_eq!(bad_kind.status.code(), Some(2));
    assert_eq!(error_json(&bad_kind)["error"]["kind"], "usage");

    let bad_field = fedsig(&["single-run", "--preset", "desk", "--no_such_field", "1"]);
    assert_eq!(bad_field.status.code(), Some(2));
    assert!(error_json(&bad_field)["error"]["message"].as_str().unwrap().contains("no_such_field"));

    let even_kernel = fedsig(&["single-run", "--preset", "desk", "--kernel_size", "8"]);
    assert_eq!(error_json(&even_kernel)["error"]["kind"], "config");

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let data = serde_json::json!({ "svc": { "task1": missing, "task2": null } }).to_string();
    let no_data = fedsig(&["single-run", "--out", dir.path().join("o").to_str().unwrap(), "--data", &data]);
    assert_eq!(no_data.status.code(), Some(1));
    assert_eq!(error_json(&no_data)["error"]["kind"], "io");

    let threads = Command::new(env!("CARGO_BIN_EXE_fedsig"))
        .args(["single-run", "--preset", "desk"])
        .env("FEDSIG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(error_json(&threads)["error"]["kind"], "usage");
}

#[test]
fn kernel_sweep_writes_one_row_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ks");
    let summary = run_quick("centralized-kernel-sweep", &out, &["--sweep", "3,9"]);
    assert_eq!(csv_rows(&out.join("results.csv")), ("kernel_size,instance,eer,accuracy".into(), 4));
    assert_eq!(summary["entries"].as_array().unwrap().len(), 2);
    assert!([3.0, 9.0].contains(&summary["best_eer_value"].as_f64().unwrap()));
    assert_eq!(csv_rows(&out.join("scores/kernel_size_9_instance_1.csv")).0, "user_id,label,score");
    assert_eq!(csv_rows(&out.join("roc/kernel_size_3_median.csv")).0, "threshold,far,frr");
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("corpus_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["total"], 400);
}

#[test]
fn federated_studies_write_boxplots_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, sweep, n) in [("fl-local-epochs", "0,1", 2), ("fl-init-ratio", "0,0.5", 2), ("fl-scalability", "1,2,5", 3)] {
        let out = dir.path().join(kind);
        let summary = run_quick(kind, &out, &["--sweep", sweep]);
        assert_eq!(csv_rows(&out.join("boxplot.csv")), ("param_value,instance,eer,accuracy".into(), n * 2));
        let (header, rows) = csv_rows(&out.join("loss_curves.csv"));
        assert_eq!(header, "param_value,instance,iteration,train_loss,eer,accuracy");
        assert_eq!(rows, n * 2 * 2);
        assert_eq!(summary["kind"], kind);
        assert!(summary["version"].as_str().unwrap().starts_with('v'));
        let history: Value =
            serde_json::from_slice(&std::fs::read(out.join("history").join(format!("{}_{}_instance_0.json", summary["swept"].as_str().unwrap(), sweep.split(',').next().unwrap()))).unwrap())
                .unwrap();
        assert_eq!(history["records"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn too_many_agents_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["fl-scalability", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(&["--sweep", "6"]);
    let out = fedsig(&args);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "dataset");
}

#[test]
fn single_run_saves_a_loadable_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"mode": "federated", "checkpoint_every": 1, "init_users": 2, "init_ratio": 0.25}"#,
    )
    .unwrap();
    let out = dir.path().join("single");
    let summary = run_quick("single-run", &out, &["--config", cfg_path.to_str().unwrap(), "--seed", "4"]);
    for key in ["eer", "accuracy", "version", "config"] {
        assert!(!summary[key].is_null(), "summary lacks {key}");
    }
    assert_eq!(summary["config"]["seed"], 4);
    assert_eq!(summary["config"]["mode"], "federated");
    assert_eq!(summary["init_samples"], 64);
    let params = checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(params.config().kernel_size, 9);
    let history: Value = serde_json::from_slice(&std::fs::read(out.join("history.json")).unwrap()).unwrap();
    let ckpt = history["records"][1]["checkpoint"].as_str().unwrap();
    assert!(checkpoint::load(&out.join(ckpt)).is_ok());
    assert_eq!(csv_rows(&out.join("roc.csv")).0, "threshold,far,frr");
    assert_eq!(csv_rows(&out.join("scores.csv")).1, 8 * 8);
}
