use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smtk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smtk"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// The run directory is the last line of stdout.
fn run_dir(out: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(text.lines().last().expect("run directory printed"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

const TINY: &str =
    "model.preset = tiny\ntrain.steps = 3\ntrain.batch_size = 2\ntrain.templates = 2,2\ntrain.worlds = 4\n";

#[test]
fn missing_config_names_the_path() {
    let out = smtk(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.cfg"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\nlearnig_rate = 0.1\n");
    let out = smtk(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));
    let out = smtk(&["train", "--set", "train.momentum=0.9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_track_follows_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out_dir = tmp.path().join("runs");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];

    let train = |seed: &str| {
        let mut args = vec!["train", "--seed", seed];
        args.extend_from_slice(&common);
        let out = smtk(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        run_dir(&out)
    };
    let a = train("7");
    let b = train("7");
    assert_ne!(a, b, "each run gets its own directory");
    let ckpt = a.join("model.smtk");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(b.join("model.smtk")).unwrap());
    let echoed = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 7\n") && echoed.contains("model.preset = tiny\n"));
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,lr_backbone,lr_head,total,focal,l1,giou,grad_norm\n"));
    assert_eq!(loss.lines().count(), 4);

    let track = || {
        let mut args = vec![
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--sequences",
            "1",
            "--update-interval",
            "20",
        ];
        args.extend_from_slice(&common);
        let out = smtk(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        run_dir(&out)
    };
    let t1 = track();
    let t2 = track();
    let trace = fs::read_to_string(t1.join("trace_000.csv")).unwrap();
    assert_eq!(trace, fs::read_to_string(t2.join("trace_000.csv")).unwrap());
    let rows: Vec<Vec<&str>> = trace.lines().skip(1).map(|l| l.split(',').collect()).collect();
    // Frame 1 is the initialization row; frames 2..=100 are predictions.
    assert_eq!(rows.len(), 100);
    assert_eq!(rows.iter().filter(|r| !r[5].is_empty()).count(), 99);
    for r in &rows {
        let frame: usize = r[0].parse().unwrap();
        let memory: usize = r[6].parse().unwrap();
        assert_eq!(memory, 1 + frame / 20, "frame {frame}");
    }
    let metrics = fs::read_to_string(t1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("sequence,frames,ao,sr50,sr75\n"));
    assert!(metrics.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out_dir = tmp.path().join("runs");
    let out = smtk(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let ckpt = run_dir(&out).join("model.smtk");
    let out = smtk(&[
        "track",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "model.preset=small",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not fit"));
}

#[test]
fn bench_writes_the_cost_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = smtk(&[
        "bench",
        "--set",
        "model.preset=tiny",
        "--set",
        "bench.repeats=2",
        "--k-max",
        "3",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = run_dir(&out);
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,k,tokens,flops,wall_ns_mean,wall_ns_std"));
    let ks: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, ["1", "2", "3", "1", "2", "3"]);
    let fits = fs::read_to_string(dir.join("fits.txt")).unwrap();
    assert!(fits.contains("sasm linear R2") && fits.contains("attention linear R2"));
}

#[test]
fn check_passes_and_catches_an_injected_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let quick = [
        "--set",
        "check.grad_seeds=1",
        "--set",
        "check.scan_instances=10",
        "--set",
        "check.causality_instances=4",
        "--set",
        "check.property_cases=20",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ];
    let mut args = vec!["check"];
    args.extend_from_slice(&quick);
    let out = smtk(&args);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("(50,10) -> [1, 6, 11, 17, 22, 28, 33, 39, 44, 50]"));

    args.extend_from_slice(&["--inject-sign-flip", "blocks.0.in_proj_x"]);
    let out = smtk(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradient check"));
}
