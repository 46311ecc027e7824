use std::path::Path;
use std::process::{Command, Output};

fn repnet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repnet"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("REPNET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = repnet(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn shipped_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/default.json")
        .display()
        .to_string()
}

/// Short training run for tests that exercise plumbing rather than quality.
fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, r#"{"train_steps": 40, "network": {"batch_size": 8}}"#).unwrap();
    path.display().to_string()
}

fn pipeline(out: &Path, config: &str) -> (String, String) {
    ok(out, &["--config", config, "gen-data"]);
    ok(out, &["--config", config, "train"]);
    ok(out, &["--config", config, "embed"]);
    let test_dir = out.join("test").display().to_string();
    let queries = out.join("queries.bin").display().to_string();
    ok(
        out,
        &["--config", config, "embed", "--data", &test_dir, "--output", &queries],
    );
    let with_eval = ok(out, &["--config", config, "query", "--with-eval"]);
    let eval = ok(out, &["--config", config, "eval"]);
    (with_eval, eval)
}

#[test]
fn default_pipeline_runs_and_eval_matches_query() {
    let dir = tempfile::tempdir().unwrap();
    let (with_eval, eval) = pipeline(dir.path(), &shipped_config());
    assert!(with_eval.starts_with("map="), "{with_eval}");
    assert_eq!(with_eval, eval);
    let map: f64 = eval.lines().next().unwrap()["map=".len()..].parse().unwrap();
    assert!(map > 0.5, "{map}");
    let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2001);
    for cmd in ["index", "cca", "saliency", "bench"] {
        ok(dir.path(), &[cmd]);
    }
    assert!(std::fs::read_to_string(dir.path().join("saliency.pgm"))
        .unwrap()
        .starts_with("P2\n"));
}

#[test]
fn reruns_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = small_config(d.path());
        pipeline(d.path(), &cfg);
    }
    for f in [
        "train/manifest.csv",
        "train/features.bin",
        "checkpoint.rpnc",
        "loss_log.csv",
        "gallery.bin",
        "rankings.csv",
    ] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn dumped_config_reproduces_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let small = small_config(dir.path());
    let flags = [
        "--config",
        small.as_str(),
        "--seed",
        "7",
        "--rep",
        "srl",
        "--k",
        "3",
        "--search",
        "bucket",
    ];
    let dumped = ok(&a, &[&flags[..], &["config"]].concat());
    let dumped_path = dir.path().join("dumped.json");
    std::fs::write(&dumped_path, &dumped).unwrap();
    for cmd in ["gen-data", "train"] {
        ok(&a, &[&flags[..], &[cmd]].concat());
        ok(&b, &["--config", dumped_path.to_str().unwrap(), cmd]);
    }
    assert_eq!(
        std::fs::read(a.join("checkpoint.rpnc")).unwrap(),
        std::fs::read(b.join("checkpoint.rpnc")).unwrap()
    );
    assert_eq!(std::fs::read_to_string(b.join("config.json")).unwrap(), dumped);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = repnet(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = repnet(dir.path(), &["--rep", "xyz", "train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_and_numerical_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(dir.path(), &["--config", &cfg, "gen-data"]);

    let o = repnet(dir.path(), &["--config", &cfg, "embed"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error code=2 kind=data msg="), "{stderr}");

    std::fs::write(dir.path().join("checkpoint.rpnc"), b"RPNC\x01\x00").unwrap();
    assert_eq!(repnet(dir.path(), &["--config", &cfg, "cca"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"netwrok": {}}"#).unwrap();
    assert_eq!(
        repnet(dir.path(), &["--config", bad.to_str().unwrap(), "config"])
            .status
            .code(),
        Some(2)
    );

    let diverge = dir.path().join("diverge.json");
    std::fs::write(
        &diverge,
        r#"{"train_steps": 50, "network": {"base_lr": 1e300, "batch_size": 4}}"#,
    )
    .unwrap();
    let o = repnet(dir.path(), &["--config", diverge.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(dir.path(), &["--config", &cfg, "gen-data"]);
    ok(dir.path(), &["--config", &cfg, "train"]);
    let single = std::fs::read(dir.path().join("checkpoint.rpnc")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_repnet"))
        .args(["--out", dir.path().to_str().unwrap(), "--config", &cfg, "train"])
        .env("REPNET_THREADS", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("checkpoint.rpnc")).unwrap(), single);
}
