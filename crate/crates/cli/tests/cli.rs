use std::path::Path;
use std::process::{Command, Output};

fn spd_agg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spd-agg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn gradcheck_default_config_exits_zero() {
    let out = spd_agg(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["blocks"].as_array().unwrap().len(), 6);
}

#[test]
fn gradcheck_with_impossible_tolerance_exits_one() {
    let out = spd_agg(&["gradcheck", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient check failed"));
}

#[test]
fn invalid_flags_exit_two() {
    assert_eq!(spd_agg(&["certify", "--aggregator", "bogus"]).status.code(), Some(2));
    assert_eq!(spd_agg(&["train"]).status.code(), Some(2));
    assert_eq!(spd_agg(&["frobnicate"]).status.code(), Some(2));
    let bad_dim = spd_agg(&[
        "certify", "--aggregator", "kernel", "--channels", "4", "--spatial", "3", "--trials", "1", "--seed", "0",
        "--transform-dim", "9",
    ]);
    assert_eq!(bad_dim.status.code(), Some(2));
}

#[test]
fn certify_contrasts_kernel_with_covariance() {
    let run = |agg: &str| {
        let out = spd_agg(&[
            "certify", "--aggregator", agg, "--channels", "64", "--spatial", "4", "--trials", "5", "--seed", "3",
        ]);
        assert!(out.status.success());
        json(&out)
    };
    let kernel = run("kernel");
    assert!(kernel["min_eig_aggregated"].as_f64().unwrap() > 0.0);
    assert_eq!(kernel["positive_trials"], 5);
    let cov = run("covariance");
    assert!(cov["min_eig_aggregated"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.fts");
    let test = dir.path().join("test.fts");
    let out = spd_agg(&[
        "synth", "--classes", "2", "--per-class", "30", "--channels", "6", "--spatial", "4", "--seed", "1",
        "--out", path(&train), "--train-count", "40", "--out-test", path(&test),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["test_samples"], 20);

    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"mixed_channels": 5, "transform_dim": 3, "epochs_per_stage": [4, 4]}"#).unwrap();
    let metrics = dir.path().join("m.jsonl");
    let ckpt = dir.path().join("c.ftsp");
    let out = spd_agg(&[
        "train", "--data", path(&train), "--test", path(&test), "--config", path(&config), "--seed", "2",
        "--out-metrics", path(&metrics), "--out-ckpt", path(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trained = json(&out);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 8);
    for line in text.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["wall_ms"], 0);
    }

    let out = spd_agg(&["eval", "--data", path(&test), "--ckpt", path(&ckpt)]);
    assert!(out.status.success());
    assert_eq!(json(&out)["accuracy"], trained["final_test_accuracy"]);
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.fts");
    let out = spd_agg(&["eval", "--data", path(&missing), "--ckpt", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let garbage = dir.path().join("garbage.fts");
    std::fs::write(&garbage, b"NOPE0000").unwrap();
    let out = spd_agg(&[
        "train", "--data", path(&garbage), "--out-metrics", path(&dir.path().join("m")), "--out-ckpt",
        path(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn malformed_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fts");
    assert!(spd_agg(&[
        "synth", "--classes", "2", "--per-class", "3", "--channels", "4", "--spatial", "2", "--seed", "0", "--out",
        path(&data),
    ])
    .status
    .success());
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"aggregator": "max"}"#).unwrap();
    let out = spd_agg(&[
        "train", "--data", path(&data), "--config", path(&config), "--out-metrics", path(&dir.path().join("m")),
        "--out-ckpt", path(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}
