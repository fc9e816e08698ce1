use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn posmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posmlp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> i64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn describe_lists_tiny_stages() {
    let o = posmlp(&["describe", "--variant", "T"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("dims: 96,192,384,768"));
    assert!(text.contains("depths: 2,2,18,2"));
}

#[test]
fn sgu_and_ggqpe_differ_by_positional_savings() {
    let count = |kind: &str| {
        let o = posmlp(&["describe", "--variant", "T", "--gating", kind]);
        assert!(o.status.success());
        field(&stdout(&o), "params excluding gate norms:")
    };
    // (depth, window side, groups) per stage
    let stages = [(2i64, 14i64, 8i64), (2, 14, 16), (18, 14, 32), (2, 7, 64)];
    let expect: i64 = stages.iter().map(|&(d, k, s)| d * (k * k * k * k - 6 * s)).sum();
    assert_eq!(count("SGU") - count("GGQPE"), expect);
}

#[test]
fn config_errors_exit_with_two() {
    let o = posmlp(&["describe", "--variant", "XL"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("T, S, B, MICRO"));

    assert_eq!(posmlp(&["describe", "--no-such-flag"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"variant":"XL"}"#).unwrap();
    let o = posmlp(&["describe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, r#"{"varient":"T"}"#).unwrap();
    assert_eq!(
        posmlp(&["describe", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_files_exit_with_three() {
    let o = posmlp(&["load", "--checkpoint", "/definitely/not/here.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    let o = posmlp(&["describe", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn help_enumerates_flags() {
    let text = stdout(&posmlp(&["train", "--help"]));
    for flag in [
        "--config",
        "--variant",
        "--gating",
        "--form",
        "--freeze-delta",
        "--use-bias",
        "--use-ape",
        "--epochs",
        "--lr",
        "--dataset",
        "--out",
        "--save",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn cost_reports_tiny_at_21m() {
    let o = posmlp(&["cost", "--variant", "T"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let params = v["params"].as_u64().unwrap();
    assert_eq!((params as f64 / 1e6).round(), 21.0);
    assert!(v["flops"].as_u64().unwrap() > 0);
}

#[test]
fn gradcheck_passes_for_gramian_ggqpe() {
    let o = posmlp(&["gradcheck", "--gating", "GGQPE", "--form", "gramian"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], Value::Bool(true));
}

fn train_run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--variant", "MICRO", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    posmlp(&args)
}

#[test]
fn synthetic_training_reaches_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_run(dir.path(), &["--dataset", "synthetic", "--epochs", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let acc: f64 = csv.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(acc > 0.9, "{csv}");
}

#[test]
fn training_is_reproducible_and_echoes_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = a.path().join("in.json");
    std::fs::write(&cfg, r#"{"variant":"S","seed":3,"train":{"epochs":9,"batch_size":16}}"#).unwrap();
    let extra = [
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
        "--samples-per-class",
        "8",
    ];
    assert!(train_run(a.path(), &extra).status.success());
    assert!(train_run(b.path(), &extra).status.success());
    for f in ["metrics.csv", "model.ckpt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let echoed = |dir: &Path| -> Value {
        let mut v: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("resolved_config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("out_dir");
        v
    };
    let resolved = echoed(a.path());
    assert_eq!(resolved, echoed(b.path()));
    assert_eq!(resolved["variant"], "MICRO");
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["train"]["batch_size"], 16);

    let ckpt = a.path().join("model.ckpt");
    let o = posmlp(&[
        "eval",
        "--variant",
        "MICRO",
        "--samples-per-class",
        "4",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["samples"], 16);
}

#[test]
fn exports_write_deterministic_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = || {
        let o = posmlp(&[
            "attn",
            "--variant",
            "MICRO",
            "--layers",
            "s0b0,s1b0",
            "--query",
            "2",
            "--out",
            out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let files: Vec<String> = v["written"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_str().unwrap().to_owned())
            .collect();
        files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let first = run();
    // two layers with 2 and 4 groups, a CSV and a PGM each
    assert_eq!(first.len(), 12);
    assert_eq!(first, run());

    let o = posmlp(&["bias", "--variant", "MICRO", "--out", out]);
    assert!(o.status.success());
    assert!(dir.path().join("s2b1_bias.csv").exists());
    assert_eq!(posmlp(&["bias", "--variant", "MICRO"]).status.code(), Some(2));
    let o = posmlp(&[
        "attn",
        "--variant",
        "MICRO",
        "--layers",
        "s0b0",
        "--query",
        "64",
        "--out",
        out,
    ]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn nonlocality_requires_gaussian_gating() {
    let o = posmlp(&["nonlocality", "--variant", "MICRO"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 5);
    let o = posmlp(&["nonlocality", "--variant", "MICRO", "--gating", "GLRPE"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let p = ckpt.to_str().unwrap();
    assert!(
        posmlp(&["save", "--variant", "MICRO", "--gating", "GLRPE", "--checkpoint", p])
            .status
            .success()
    );
    let o = posmlp(&["load", "--checkpoint", p]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("gating GLRPE"));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(posmlp(&["load", "--checkpoint", p]).status.code(), Some(3));
}
