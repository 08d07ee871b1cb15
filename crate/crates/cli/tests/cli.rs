use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaptive_attention::data::{synthetic_cifar, write_cifar_dir};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adaptive-attn"));
    c.env_remove("ADAPTIVE_ATTN_DATA");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, primitive: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--primitive",
        primitive,
        "--synthetic",
        "150",
        "--val-count",
        "50",
        "--batch",
        "25",
        "--seed",
        "5",
        "--quiet",
        "--out",
        out.to_str().unwrap(),
    ];
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "1"]);
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Metrics rows with the wall-clock column removed.
fn timeless_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.splitn(8, ',').collect();
            format!("{}|{}", cols[..6].join(","), cols[7])
        })
        .collect()
}

#[test]
fn train_writes_outputs_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = train_tiny(&a, "adaptive", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.json",
        "metrics.csv",
        "summary.json",
        "best.ckpt/manifest.txt",
        "last.ckpt/manifest.txt",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds,spans_json")
    );
    assert_eq!(lines.count(), 1);
    let cfg = json(&a.join("config.json"));
    assert_eq!(cfg["train"]["lr0"], 0.05);
    assert_eq!(cfg["train"]["weight_decay"], 0.0005);
    assert_eq!(cfg["train"]["warmup_epochs"], 0);
    let std = cfg["data"]["norm"]["std"].as_array().unwrap();
    assert!(std.len() == 3 && std.iter().all(|s| s.as_f64().unwrap() > 0.0));

    let b = dir.path().join("b");
    let o = run(&[
        "train",
        "--config",
        a.join("config.json").to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        timeless_rows(&a.join("metrics.csv")),
        timeless_rows(&b.join("metrics.csv"))
    );
    let (sa, sb) = (json(&a.join("summary.json")), json(&b.join("summary.json")));
    assert_eq!(sa["metrics"]["test_acc"], sb["metrics"]["test_acc"]);
    let mut cb = json(&b.join("config.json"));
    cb["out"] = cfg["out"].clone();
    assert_eq!(cb, cfg);
}

#[test]
fn eval_spans_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    assert!(train_tiny(&run_dir, "adaptive", &[]).status.success());
    let ck = run_dir.join("best.ckpt");
    let ck = ck.to_str().unwrap();

    let o = run(&["eval", "--checkpoint", ck, "--split", "val", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let summary = json(&run_dir.join("summary.json"));
    assert_eq!(r["accuracy"], summary["metrics"]["best_val_acc"]);
    let again = run(&["eval", "--checkpoint", ck, "--split", "val", "--json"]);
    assert_eq!(stdout(&again), stdout(&o));

    let o = run(&["eval", "--checkpoint", ck, "--primitive", "conv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("configuration mismatch"), "{}", stderr(&o));

    let o = run(&["spans", "--checkpoint", ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("extents: "), "{text}");
    let extents: Vec<usize> = last["extents: ".len()..]
        .split(' ')
        .map(|e| e.parse().unwrap())
        .collect();
    assert_eq!(extents.len(), 3);
    assert!(extents.iter().all(|e| e % 2 == 1));

    let conv = dir.path().join("c");
    assert!(train_tiny(&conv, "conv", &["--epochs", "0"]).status.success());
    let o = run(&["spans", "--checkpoint", conv.join("last.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = run(&[
        "train",
        "--primitive",
        "conv",
        "--synthetic",
        "10000",
        "--epochs",
        "0",
        "--quiet",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("best.ckpt").exists());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
    let o = run(&[
        "eval",
        "--checkpoint",
        out.join("last.ckpt").to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = r["accuracy"].as_f64().unwrap();
    assert_eq!(r["images"], 2000);
    assert!((0.005..=0.02).contains(&acc), "accuracy {acc}");
}

#[test]
fn flag_validation_exit_codes() {
    let o = run(&["train", "--primitive", "conv", "--ramp", "3", "--synthetic", "100"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conflicting flags"));
    let o = run(&[
        "train",
        "--primitive",
        "fixed",
        "--init-span",
        "2",
        "--synthetic",
        "100",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--primitive", "conv", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--primitive", "conv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no dataset"));
    let o = run(&[
        "train",
        "--primitive",
        "conv",
        "--synthetic",
        "100",
        "--fraction",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--primitive", "conv", "--data", "/nonexistent/cifar"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn diverging_run_exits_with_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = train_tiny(&out, "conv", &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
    assert!(out.join("diagnostic.json").is_file());
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    let (train, test) = synthetic_cifar(120, 40, 1);
    write_cifar_dir(&data, &train, &test).unwrap();
    let out = dir.path().join("r");
    let o = bin()
        .env("ADAPTIVE_ATTN_DATA", &data)
        .args([
            "train",
            "--primitive",
            "fixed",
            "--epochs",
            "1",
            "--batch",
            "20",
            "--val-count",
            "20",
            "--quiet",
        ])
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = json(&out.join("config.json"));
    assert_eq!(cfg["data"]["source"]["dir"], data.to_str().unwrap());
}

#[test]
fn gradcheck_reports_pass() {
    let o = run(&["gradcheck", "--target", "attention"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    for group in ["q", "k", "v", "emb_h", "emb_w", "z"] {
        assert!(text.contains(&format!("PASS attention/adaptive/{group} ")), "{text}");
    }
    assert!(text.lines().last().unwrap().starts_with("PASS all"));
}

#[test]
fn analyze_and_export() {
    let o = run(&["analyze", "--primitive", "conv", "--size", "small", "--json"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let params = r["total_params"].as_f64().unwrap();
    assert!((params / 0.54e6 - 1.0).abs() <= 0.10);
    let o = run(&["analyze", "--primitive", "adaptive", "--size", "medium"]);
    assert!(
        stdout(&o).contains("adaptive extents at reporting time: 7 7 7 7"),
        "{}",
        stdout(&o)
    );

    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for (p, frac) in [("conv", "1"), ("fixed", "1"), ("fixed", "0.5")] {
        let out = runs.join(format!("{p}-{frac}"));
        let o = train_tiny(&out, p, &["--epochs", "0", "--fraction", frac]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let plots = dir.path().join("plots");
    let o = run(&[
        "export-plots",
        "--runs",
        runs.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cost = fs::read_to_string(plots.join("accuracy_vs_cost.csv")).unwrap();
    let frac = fs::read_to_string(plots.join("accuracy_vs_fraction.csv")).unwrap();
    assert_eq!(cost.lines().count(), 3);
    assert_eq!(frac.lines().count(), 4);
    assert!(cost.starts_with("params,flops,acc,primitive,size_class\n"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = run(&[
        "export-plots",
        "--runs",
        empty.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
