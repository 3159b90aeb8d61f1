//! The `pmx` binary end to end: file outputs, exit codes and report schema.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pmx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmx")).args(args).output().expect("run pmx")
}

fn ok(args: &[&str]) -> Output {
    let out = pmx(args);
    assert!(
        out.status.success(),
        "pmx {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-synth",
        "--n",
        "300",
        "--seed",
        seed,
        "--embedding-dim",
        "24",
        "--separation",
        "6",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
}

fn data_args(dir: &Path) -> Vec<String> {
    vec![
        "--data-clinical".into(),
        dir.join("clinical.csv").display().to_string(),
        "--data-embeddings".into(),
        dir.join("embeddings.bin").display().to_string(),
    ]
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn gen_synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "7");
    gen(&b, "7");
    for f in ["clinical.csv", "embeddings.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = pmx(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(pmx(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let out = pmx(&["export-prototypes", "--checkpoint", "/nonexistent/ckpt.pmxc"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "3");
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "patience = 0\n").unwrap();
    let mut args = vec!["train".to_string(), "--embedding-dim".into(), "24".into(), "--config".into()];
    args.push(cfg.display().to_string());
    args.extend(data_args(tmp.path()));
    assert_eq!(pmx(&strs(&args)).status.code(), Some(1));
}

#[test]
fn train_eval_predict_explain_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen(&data, "5");
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, "max_epochs = 40\nbatch_size = 32\nprototypes_per_class = 4\n").unwrap();

    let mut train = vec![
        "train".to_string(),
        "--embedding-dim".into(),
        "24".into(),
        "--config".into(),
        cfg.display().to_string(),
        "--max-epochs".into(),
        "12".into(),
        "--seed".into(),
        "5".into(),
        "--out-dir".into(),
        run.display().to_string(),
    ];
    train.extend(data_args(&data));
    ok(&strs(&train));
    let manifest: Value = serde_json::from_slice(&std::fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
    // flag beats file beats default
    assert_eq!(manifest["config"]["max_epochs"], 12);
    assert_eq!(manifest["config"]["batch_size"], 32);
    assert_eq!(manifest["config"]["patience"], 15);
    let ckpt = run.join("checkpoint.pmxc");
    let ckpt_s = ckpt.display().to_string();

    let mut eval = vec!["eval".to_string(), "--checkpoint".into(), ckpt_s.clone(), "--out-dir".into()];
    eval.push(tmp.path().join("eval").display().to_string());
    eval.extend(data_args(&data));
    ok(&strs(&eval));
    let metrics: Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("eval/metrics.json")).unwrap()).unwrap();
    let confusion = metrics["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 3);
    let n: u64 = confusion.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(n, metrics["n"].as_u64().unwrap());

    let mut predict = vec!["predict".to_string(), "--checkpoint".into(), ckpt_s.clone(), "--case".into()];
    predict.push("SYN001".into());
    predict.extend(data_args(&data));
    let out = ok(&strs(&predict));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("patient_id,true_label,prediction,confidence"));
    assert_eq!(text.lines().count(), 2);

    let mut explain = vec![
        "explain".to_string(),
        "--checkpoint".into(),
        ckpt_s.clone(),
        "--case".into(),
        "SYN002".into(),
        "--true-label".into(),
        "osteopenia".into(),
    ];
    explain.extend(data_args(&data));
    let out = ok(&strs(&explain));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    check_report_schema(&report);

    let export = tmp.path().join("protos");
    ok(&["export-prototypes", "--checkpoint", &ckpt_s, "--out-dir", export.to_str().unwrap()]);
    let csv = std::fs::read_to_string(export.join("prototypes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2).is_some_and(|id| id.starts_with("SYN"))));

    let mut bad_k = vec!["predict".to_string(), "--checkpoint".into(), ckpt_s, "--k".into(), "0".into()];
    bad_k.extend(data_args(&data));
    assert_eq!(pmx(&strs(&bad_k)).status.code(), Some(1));
}

fn check_report_schema(r: &Value) {
    for key in ["prediction", "confidence", "alpha", "votes", "neighbors", "deviations", "checkpoint_id", "audit"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let label = |v: &Value| ["normal", "osteopenia", "osteoporosis"].contains(&v.as_str().unwrap());
    assert!(label(&r["prediction"]));
    let c = r["confidence"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    let votes: f64 = ["normal", "osteopenia", "osteoporosis"]
        .iter()
        .map(|k| r["votes"][k].as_f64().unwrap())
        .sum();
    assert!((votes - 1.0).abs() < 1e-9);
    let neighbors = r["neighbors"].as_array().unwrap();
    assert_eq!(neighbors.len(), 3);
    for n in neighbors {
        assert!(label(&n["class"]));
        for key in ["slot", "source_patient_id", "source_t_score", "distance", "weight", "clinical"] {
            assert!(!n[key].is_null(), "neighbor missing {key}");
        }
        assert_eq!(n["clinical"].as_object().unwrap().len(), 11);
    }
    let deviations = r["deviations"].as_array().unwrap();
    assert_eq!(deviations.len(), 11);
    for d in deviations {
        assert!(d["feature"].is_string() && d["delta"].is_f64() && d["flagged"].is_boolean());
    }
    assert!(label(&r["audit"]["true_label"]));
    assert!(r["audit"]["true_class_nearest_prototype"]["source_patient_id"].is_string());
}

#[test]
fn gradcheck_command_passes() {
    let out = ok(&["gradcheck", "--seeds", "2", "--seed", "40"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("gradient check passed"));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 12);
}
