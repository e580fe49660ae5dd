//! The command line front end: the five stages end to end on a tiny config,
//! exit codes, and failures that leave no partial outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flow4dsr::dataset::read_volumes;
use flow4dsr::eval::EvaluationReport;
use flow4dsr::net::Checkpoint;

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json");

fn flow4dsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flow4dsr"))
        .args(args)
        .env("FLOW4DSR_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn flow4dsr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn copy_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::copy(SMOKE, &p).unwrap();
    p
}

#[test]
fn five_stages_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    fs::create_dir(dir.path().join("frames")).unwrap();

    for cmd in ["generate", "build-dataset", "train", "predict", "evaluate"] {
        let out = flow4dsr(&[cmd, "--config", cfg]);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    }
    for f in ["frames/tube_a.f4d", "dataset/manifest.json", "model.f4dw", "train_log.tsv", "report/frames.tsv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert!(log.lines().all(|l| l.split('\t').count() == 5));

    let ck = Checkpoint::load(&dir.path().join("model.f4dw")).unwrap();
    assert!(ck.validation_metric.is_some());
    let (h, sr) = read_volumes(&dir.path().join("prediction.f4d")).unwrap();
    assert_eq!(h.dims, [32; 3]);
    assert_eq!(sr.len(), 4);

    let json = fs::read_to_string(dir.path().join("report/report.json")).unwrap();
    let report: EvaluationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.frames.len(), 4);
    let methods: Vec<&str> = report.mean_rel_speed_error.keys().map(String::as_str).collect();
    assert_eq!(methods, ["network", "sinc", "tricubic", "trilinear"]);
}

#[test]
fn seed_and_out_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    let run = |out: &Path, seed: &str| {
        let o = flow4dsr(&["generate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run(&a, "1");
    run(&b, "2");
    assert!(!dir.path().join("frames").exists());
    let bytes = |d: &Path| fs::read(d.join("tube_a.f4d")).unwrap();
    // The seed is recorded in the header, the frames themselves are analytic.
    assert_ne!(bytes(&a), bytes(&b));
    let (_, fa) = read_volumes(&a.join("tube_a.f4d")).unwrap();
    let (_, fb) = read_volumes(&b.join("tube_a.f4d")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn invalid_config_exits_2_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(SMOKE).unwrap().replace("\"n_frames\": 4", "\"n_frames\": 0");
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, text).unwrap();
    fs::create_dir(dir.path().join("frames")).unwrap();
    let out = flow4dsr(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("configuration error"));
    assert_eq!(fs::read_dir(dir.path().join("frames")).unwrap().count(), 0);
}

#[test]
fn malformed_json_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, "{ \"seed\": ").unwrap();
    assert_eq!(code(&flow4dsr(&["train", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&flow4dsr(&["train"])), 2);
    assert_eq!(code(&flow4dsr(&["frobnicate", "--config", SMOKE])), 2);
}

#[test]
fn missing_paths_exit_1_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = flow4dsr(&["generate", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.json"));

    let cfg = copy_config(dir.path());
    let out = flow4dsr(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("frames"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    fs::create_dir(dir.path().join("frames")).unwrap();
    for cmd in ["generate", "build-dataset"] {
        assert_eq!(code(&flow4dsr(&[cmd, "--config", cfg])), 0);
    }
    let ck = dir.path().join("bad.f4dw");
    fs::write(&ck, b"F4DW\x01\x00\x00\x00garbage").unwrap();
    let out = flow4dsr(&["predict", "--config", cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(!dir.path().join("prediction.f4d").exists());
}
