use std::path::Path;
use std::process::{Command, Output};

fn manet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manet"))
        .args(args)
        .env_remove("MANET_CONFIG_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = manet(args);
    assert!(out.status.success(), "manet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code 1 and a single JSON error line with the given kind.
fn fails_with(args: &[&str], kind: &str) {
    let out = manet(args);
    assert_eq!(out.status.code(), Some(1), "manet {args:?}");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(line["error"]["kind"], kind, "{stderr}");
    assert!(line["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) {
    ok(&["gen", "--out", p(dir), "--clips-per-class", "4", "--raw-frames", "8", "--seed", seed]);
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = tmp.path().join("g.json");
    std::fs::write(&cfg, r#"{"num_fine": 4, "num_coarse": 2, "clips_per_class": 4, "raw_frames": 8}"#).unwrap();
    let s1 = ok(&["gen", "--config", p(&cfg), "--out", p(&a), "--seed", "7"]);
    let s2 = ok(&["gen", "--config", p(&cfg), "--out", p(&b), "--seed", "7"]);
    assert_eq!(s1, s2);
    let summary: serde_json::Value = serde_json::from_str(&s1).unwrap();
    assert_eq!(summary["num_clips"], 16);
    assert_eq!(summary["split_sizes"], serde_json::json!([8, 4, 4]));
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn config_dir_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_dir = tmp.path().join("cfg");
    std::fs::create_dir(&cfg_dir).unwrap();
    std::fs::write(cfg_dir.join("gen.json"), r#"{"num_fine": 3, "num_coarse": 1, "clips_per_class": 4, "raw_frames": 4}"#)
        .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_manet"))
        .args(["gen", "--out", p(&tmp.path().join("d"))])
        .env("MANET_CONFIG_DIR", &cfg_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["num_clips"], 12);
}

#[test]
fn train_eval_predict_metrics_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen_small(&data, "5");
    let line = ok(&["train", "--data", p(&data), "--out", p(&run), "--preset", "desk", "--epochs", "1", "--seed", "5"]);
    let info: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(info["best_epoch"], 0);
    for f in ["best.ckpt", "log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("best.ckpt");

    let report = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--split", "val"]);
    let r: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["num_samples"], 6);
    assert_eq!(r["recognition"]["f1_micro_fine"], r["recognition"]["acc_top1_fine"]);

    let pred = tmp.path().join("pred.jsonl");
    let pct = ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--predictions", p(&pred), "--percent"]);
    let offline = ok(&[
        "metrics",
        "--pred",
        p(&pred),
        "--gt",
        p(&data.join("manifest.jsonl")),
        "--taxonomy",
        p(&data.join("taxonomy.json")),
        "--percent",
    ]);
    assert_eq!(pct, offline);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&pct).unwrap()["scale"], "percent");

    let clip = std::fs::read_dir(data.join("test")).unwrap().next().unwrap().unwrap().path();
    let ranked = ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--clip",
        p(&clip),
        "--taxonomy",
        p(&data.join("taxonomy.json")),
        "--top-k",
        "3",
    ]);
    let v: serde_json::Value = serde_json::from_str(&ranked).unwrap();
    let s = v.to_string();
    assert_eq!(s.matches("\"fine_id\"").count(), 3, "{s}");

    // an emotion-only flag on the recognizer is a config error
    fails_with(&["train", "--data", p(&data), "--out", p(&run), "--beta", "0.1"], "config");
    // a recognizer checkpoint is not an emotion checkpoint
    fails_with(&["eval-emotion", "--data", p(&data), "--checkpoint", p(&ckpt)], "checkpoint");
}

#[test]
fn errors_are_single_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    fails_with(&["eval", "--data", p(&missing), "--checkpoint", p(&missing)], "config");
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ \"num_fine\": ").unwrap();
    fails_with(&["gen", "--config", p(&bad), "--out", p(&tmp.path().join("o"))], "parse");
    fails_with(&["gen", "--out", p(&tmp.path().join("o")), "--num-fine", "1", "--num-coarse", "2"], "config");

    let data = tmp.path().join("data");
    gen_small(&data, "1");
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    fails_with(&["eval", "--data", p(&data), "--checkpoint", p(&junk)], "checkpoint");
    fails_with(&["train-emotion", "--data", p(&data), "--out", p(&tmp.path().join("e")), "--preset", "desk"], "dataset");
}

#[test]
fn usage_errors_exit_two() {
    let out = manet(&["gen"]);
    assert_eq!(out.status.code(), Some(2));
    let out = manet(&["train", "--data", "x", "--out", "y", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    let out = manet(&["gen", "--out", "x", "--split", "2:1"]);
    assert_eq!(out.status.code(), Some(2));
}
