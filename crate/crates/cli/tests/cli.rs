use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn statdiv(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_statdiv"))
        .args(args)
        .env("STATDIV_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) {
    let out = statdiv(
        &[
            "gen",
            "--out",
            path(&dir.join("data")),
            "--classes",
            "3",
            "--sets-per-class",
            "5",
            "--samples",
            "30",
            "--dim",
            "4",
            "--seed",
            "11",
        ],
        "1",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_report_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        r#"{ "data": { "source": "manifest", "path": "data/manifest.json" },
             "pipeline": "kfda", "kernel": "hl", "repetitions": 3, "seed": 5 }"#,
    )
    .unwrap();

    let mut reports = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(format!("out{threads}"));
        let out = statdiv(&["eval", "--config", path(&config), "--out", path(&out_dir)], threads);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("accuracy.csv").exists());
        assert!(out_dir.join("timings.json").exists());
        reports.push(fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_nn_dr_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let config = dir.path().join("exp.json");
    fs::write(
        &config,
        r#"{ "data": { "source": "manifest", "path": "data/manifest.json" },
             "pipeline": "nn_dr", "repetitions": 1, "dr": { "target_dim": 2, "cg": { "max_iters": 5 } } }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = statdiv(&["eval", "--config", path(&config), "--out", path(&out_dir)], "2");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.contains("cost"));
}

#[test]
fn kfda_bundle_reloads_to_same_predictions() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let data = dir.path().join("data/manifest.json");
    let model = dir.path().join("model");
    let fit = statdiv(
        &[
            "classify",
            "--pipeline",
            "kfda",
            "--kernel",
            "hg",
            "--gallery",
            path(&data),
            "--probe",
            path(&data),
            "--save-model",
            path(&model),
            "--out",
            path(&dir.path().join("a")),
        ],
        "2",
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let reload = statdiv(
        &[
            "classify",
            "--pipeline",
            "kfda",
            "--model",
            path(&model),
            "--probe",
            path(&data),
            "--out",
            path(&dir.path().join("b")),
        ],
        "2",
    );
    assert!(reload.status.success(), "{}", String::from_utf8_lossy(&reload.stderr));
    let a = fs::read_to_string(dir.path().join("a/predictions.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/predictions.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes_distinguish_bad_config_from_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let config = dir.path().join("bad.json");
    fs::write(
        &config,
        r#"{ "data": { "source": "manifest", "path": "data/manifest.json" }, "pipeline": "nn", "kernel": "hg" }"#,
    )
    .unwrap();
    let bad = statdiv(&["eval", "--config", path(&config), "--out", path(&dir.path().join("o"))], "1");
    assert_eq!(bad.status.code(), Some(1));

    let missing = statdiv(&["dist", "--data", path(&dir.path().join("nope.json")), "--out", "x.csv"], "1");
    assert_eq!(missing.status.code(), Some(2));

    let usage = statdiv(&["eval"], "1");
    assert_eq!(usage.status.code(), Some(1));

    let threads = statdiv(&["eval", "--config", path(&config), "--out", "o"], "zero");
    assert_eq!(threads.status.code(), Some(1));
}
