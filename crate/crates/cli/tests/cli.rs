use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpl"))
        .args(args)
        .env_remove("RPL_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rpl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&[
        "simulate",
        "--out",
        p(&data),
        "--source-frames",
        "40",
        "--target-train-frames",
        "20",
        "--target-test-frames",
        "15",
    ]);
    p(&data).to_string()
}

#[test]
fn thresholds_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let fg = dir.path().join("fg.jsonl");
    let lines = [("A", 0.2), ("A", 0.5), ("A", 0.6), ("A", 0.9), ("B", 0.3), ("B", 0.7)]
        .map(|(c, s)| format!("{{\"class\":\"{c}\",\"score\":{s}}}"));
    fs::write(&fg, lines.join("\n")).unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(&["thresholds", "--foreground", p(&fg), "--classes", "A,B"])).unwrap();
    assert_eq!(out["classes"]["A"]["threshold"], 0.6);
    assert_eq!(out["classes"]["B"]["threshold"], 0.3);
}

#[test]
fn selftrain_is_reproducible_and_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\niterations = 30\nrefresh_interval = 10\n\n[pretrain]\nepochs = 3\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["selftrain", "--config", p(&cfg), "--data", &data, "--out", p(&out), "--seed", "7", "--iterations", "20"]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["config.toml", "losses.csv", "summary.json", "teacher.ckpt", "student.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let effective = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(effective.contains("iterations = 20"), "{effective}");
    assert!(effective.contains("refresh_interval = 10"), "{effective}");
    assert_eq!(fs::read_to_string(a.join("losses.csv")).unwrap().lines().count(), 21);
}

#[test]
fn fixed_threshold_arm_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("o");
    ok(&["selftrain", "--data", &data, "--out", p(&out), "--iterations", "5", "--no-cate", "--fixed-delta", "0.9"]);
    let effective = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(effective.contains("cate = false") && effective.contains("fixed_delta = 0.9"), "{effective}");

    let bad = rpl(&["selftrain", "--data", &data, "--out", p(&out), "--fixed-delta", "0.9"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(error_json(&bad)["error"], "config");
}

#[test]
fn config_path_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nfallback_threshold = 0.25\n").unwrap();
    let fg = dir.path().join("fg.jsonl");
    fs::write(&fg, "{\"class\":0,\"score\":0.8}\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rpl"))
        .args(["thresholds", "--foreground", p(&fg), "--classes", "a,b"])
        .env("RPL_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["fallback"], 0.25);
    let flag: serde_json::Value =
        serde_json::from_str(&ok(&["thresholds", "--config", p(&cfg), "--foreground", p(&fg), "--classes", "a,b", "--fallback", "0.4"]))
            .unwrap();
    assert_eq!(flag["fallback"], 0.4);
}

#[test]
fn pipeline_subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let manifest = format!("{data}/manifest.json");
    let ckpt = dir.path().join("src.ckpt");
    ok(&["pretrain", "--data", &data, "--out", p(&ckpt), "--epochs", "3"]);
    let groups = dir.path().join("nms.jsonl");
    ok(&["nms", "--frames", &format!("{data}/target_train.jsonl"), "--manifest", &manifest, "--ckpt", p(&ckpt), "--out", p(&groups)]);
    assert!(!fs::read_to_string(&groups).unwrap().is_empty());
    let labels = dir.path().join("labels.jsonl");
    let assigned: serde_json::Value = serde_json::from_str(&ok(&[
        "assign",
        "--frames",
        &format!("{data}/target_train.jsonl"),
        "--manifest",
        &manifest,
        "--ckpt",
        p(&ckpt),
        "--out",
        p(&labels),
    ]))
    .unwrap();
    assert!(assigned["certain"].as_u64().unwrap() + assigned["uncertain"].as_u64().unwrap() > 0);
    let report = dir.path().join("eval");
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--gt",
        &format!("{data}/target_audit.jsonl"),
        "--ckpt",
        p(&ckpt),
        "--labels",
        p(&labels),
        "--manifest",
        &manifest,
        "--out",
        p(&report),
    ]))
    .unwrap();
    let map = summary["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(summary["dispersion"].as_f64().is_some());
    assert!(report.join("ap.json").exists() && report.join("audit.json").exists());
}

#[test]
fn failures_print_one_json_line() {
    let usage = rpl(&["selftrain", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_json(&usage)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let missing = rpl(&["pretrain", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("x"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_json(&missing)["error"], "io");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nalpah = 0.9\n").unwrap();
    let fg = dir.path().join("fg.jsonl");
    fs::write(&fg, "{\"class\":0,\"score\":0.8}\n").unwrap();
    let typo = rpl(&["thresholds", "--config", p(&cfg), "--foreground", p(&fg)]);
    assert_eq!(typo.status.code(), Some(1));
    assert_eq!(error_json(&typo)["error"], "config_parse");

    fs::write(&fg, "{\"class\":\"zebra\",\"score\":0.8}\n").unwrap();
    let unknown = rpl(&["thresholds", "--foreground", p(&fg), "--classes", "a,b"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(error_json(&unknown)["error"], "data");
}
