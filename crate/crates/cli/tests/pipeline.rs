use std::path::Path;
use std::process::Command as Process;

use lownoise::manifest::Manifest;
use lownoise::pipeline::{execute, verify, Command};
use lownoise::{ExperimentConfig, Stage};

fn small_config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "catalog": "Uniform",
            "objectives": [{{"kind": "NCSN"}}],
            "train": {{"epochs": 2, "batch_size": 32}},
            "sampler": {{"steps": 20, "max_steps": 30}},
            "sizes": [10],
            "sigma_list": [0.01, 0.1]
            {extra}
        }}"#
    ))
    .unwrap()
}

fn files_under(m: &Manifest, prefix: &str, suffix: &str) -> usize {
    m.files
        .iter()
        .filter(|f| f.path.starts_with(prefix) && f.path.ends_with(suffix))
        .count()
}

#[test]
fn consistency_pipeline_structure_at_size_1000() {
    let cfg = ExperimentConfig::from_json(
        r#"{"catalog": "Uniform", "objectives": [{"kind": "NCSN"}],
            "probes": [{"kind": "consistency"}], "sizes": [1000]}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    execute(Command::Run, &cfg, dir.path()).unwrap();
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(files_under(&m, "checkpoints/", ".ckpt.json"), 2);
    assert_eq!(files_under(&m, "probes/", ".csv"), 6);
    assert_eq!(files_under(&m, "probes/", ".json"), 1);
    for sigma in ["0.001", "0.01", "0.05", "0.1", "0.2", "1"] {
        let name = format!("probes/NCSN/consistency_Uniform_1000_{sigma}.csv");
        assert!(m.find(&name).is_some(), "{name}");
    }
    assert!(verify(&cfg, dir.path()).unwrap().is_empty());
}

#[test]
fn standalone_stages_match_run() {
    let cfg = small_config(
        r#", "probes": [{"kind": "consistency", "params": {"samples": 5}},
                       {"kind": "attractor", "params": {"samples": 5}},
                       {"kind": "score_accuracy", "params": {"n_eval": 50}},
                       {"kind": "denoising_performance", "params": {"samples": 5}},
                       {"kind": "trajectory_comparison", "params": {"samples": 4}}]"#,
    );
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    execute(Command::Run, &cfg, a.path()).unwrap();
    for c in [
        Command::GenData,
        Command::Train,
        Command::Probe,
        Command::Report,
        Command::Plot,
    ] {
        execute(c, &cfg, b.path()).unwrap();
    }
    let (ma, mb) = (
        Manifest::load(a.path()).unwrap(),
        Manifest::load(b.path()).unwrap(),
    );
    assert_eq!(ma, mb);
    assert!(files_under(&ma, "plots/", ".svg") > 0);
    assert_eq!(files_under(&ma, "probes/", "_paths.csv"), 1);
    assert!(verify(&cfg, a.path()).unwrap().is_empty());
}

#[test]
fn rerun_reuses_checkpoints() {
    let cfg = small_config("");
    let dir = tempfile::tempdir().unwrap();
    execute(Command::Run, &cfg, dir.path()).unwrap();
    let ckpt = dir.path().join("checkpoints/NCSN_Uniform_10_A.ckpt.json");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    execute(Command::Train, &cfg, dir.path()).unwrap();
    assert_eq!(
        std::fs::metadata(&ckpt).unwrap().modified().unwrap(),
        before
    );

    let mut changed = cfg.clone();
    changed.train.epochs = 3;
    execute(Command::Train, &changed, dir.path()).unwrap();
    let text = std::fs::read_to_string(&ckpt).unwrap();
    assert!(text.contains("\"epochs\": 3"));
}

#[test]
fn missing_checkpoint_fails_in_load_stage() {
    let cfg = small_config(
        r#", "probes": [{"kind": "attractor", "params": {"checkpoint": "/nonexistent/model.ckpt.json"}}]"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let e = execute(Command::Run, &cfg, dir.path()).unwrap_err();
    assert_eq!(e.stage, Stage::Load);
    assert!(e.message.contains("/nonexistent/model.ckpt.json"), "{e}");
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn probe_before_train_fails_in_load_stage() {
    let cfg = small_config("");
    let dir = tempfile::tempdir().unwrap();
    execute(Command::GenData, &cfg, dir.path()).unwrap();
    let e = execute(Command::Probe, &cfg, dir.path()).unwrap_err();
    assert_eq!(e.stage, Stage::Load);
    assert!(e.message.contains("NCSN_Uniform_10_A.ckpt.json"), "{e}");
}

#[test]
fn verify_flags_edits() {
    let cfg = small_config("");
    let dir = tempfile::tempdir().unwrap();
    execute(Command::Run, &cfg, dir.path()).unwrap();
    let csv = dir
        .path()
        .join("probes/NCSN/consistency_Uniform_10_0.1.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let tampered = text.replacen(",0,", ",7,", 1);
    assert_ne!(text, tampered);
    std::fs::write(&csv, tampered).unwrap();
    let problems = verify(&cfg, dir.path()).unwrap();
    assert!(
        problems.iter().any(|p| p.contains("hash mismatch")),
        "{problems:?}"
    );
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn binary_reports_stage_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_lownoise");
    let bad = write_config(
        dir.path(),
        r#"{"catalog": "Uniform", "objectives": [{"kind": "NCSN"}], "sigma_lader": [0.1]}"#,
    );
    let out = Process::new(bin)
        .args(["verify", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("[config]") && err.contains("sigma_lader"),
        "{err}"
    );

    let good = write_config(
        dir.path(),
        r#"{"catalog": "Uniform", "objectives": [{"kind": "NCSN"}],
            "train": {"epochs": 1}, "sampler": {"steps": 5, "max_steps": 5},
            "sizes": [1], "sigma_list": [0.1],
            "probes": [{"kind": "attractor", "params": {"samples": 3}}]}"#,
    );
    let out_dir = dir.path().join("out");
    let run = |args: &[&str]| {
        Process::new(bin)
            .args(args)
            .arg("--config")
            .arg(&good)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap()
    };
    assert!(run(&["run", "--seed", "5", "--threads", "2"])
        .status
        .success());
    let verified = run(&["verify", "--seed", "5"]);
    assert!(
        verified.status.success(),
        "{}",
        String::from_utf8_lossy(&verified.stderr)
    );
    assert!(!run(&["run", "--threads", "0"]).status.success());
}
