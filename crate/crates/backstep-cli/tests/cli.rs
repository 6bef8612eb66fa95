//! End-to-end tests of the command-line interface: exit codes, artifact
//! layout, manifest guarding, and full-pipeline determinism.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backstep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Column `col` of the last data row of a CSV file.
fn last_csv_value(path: &Path, col: usize) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let last = text.lines().last().unwrap();
    last.split(',').nth(col).unwrap().parse().unwrap()
}

fn first_csv_value(path: &Path, col: usize) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let first = text.lines().nth(1).unwrap();
    first.split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("simulate"));
}

#[test]
fn unknown_flags_exit_one() {
    let out = run(&["simulate", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn cfl_violation_exits_one_naming_the_condition() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--dx",
        "0.01",
        "--dt",
        "0.02",
        "--horizon",
        "1",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("CFL"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_controller_kind_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--controller",
        "pid",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("controller.kind"));
}

#[test]
fn learned_controller_without_model_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--out",
        dir.path().to_str().unwrap(),
        "--controller",
        "no-lyapunov",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("controller.model"));
}

#[test]
fn open_loop_blow_up_exits_two_with_growth_in_scalars() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "simulate",
        "--out",
        out_dir.to_str().unwrap(),
        "--controller",
        "open-loop",
        "--sigma",
        "2.9",
        "--dt",
        "0.01",
        "--horizon",
        "150",
        "--sample-every",
        "0.5",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("blow-up"));
    // Partial outputs and the manifest are still written.
    for name in ["u.csv", "scalars.csv", "manifest.toml"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    let initial = first_csv_value(&out_dir.join("scalars.csv"), 2);
    let final_norm = last_csv_value(&out_dir.join("scalars.csv"), 2);
    assert!(
        final_norm > 1e6 * initial.max(1e-300),
        "expected runaway growth, got {initial} -> {final_norm}"
    );
}

#[test]
fn closed_loop_run_exits_zero_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "simulate",
        "--out",
        out_dir.to_str().unwrap(),
        "--controller",
        "exact-lyapunov",
        "--horizon",
        "1",
        "--sample-every",
        "0.25",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for name in ["u.csv", "beta_hat.csv", "kernel.csv", "scalars.csv", "manifest.toml"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    assert!(!out_dir.join("u_hat.csv").exists());
    let manifest = std::fs::read_to_string(out_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"simulate\""));
    assert!(manifest.contains("controller = \"exact-lyapunov\""));
}

#[test]
fn passive_run_writes_the_observer_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "simulate",
        "--out",
        out_dir.to_str().unwrap(),
        "--controller",
        "exact-passive",
        "--horizon",
        "0.5",
        "--sample-every",
        "0.25",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(out_dir.join("u_hat.csv").exists());
}

#[test]
fn manifest_guard_requires_force_to_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let args = [
        "simulate",
        "--out",
        out_dir.to_str().unwrap(),
        "--controller",
        "exact-lyapunov",
        "--horizon",
        "0.5",
        "--sample-every",
        "0.25",
    ];
    assert_eq!(code(&run(&args)), 0);
    let second = run(&args);
    assert_eq!(code(&second), 1);
    assert!(stderr(&second).contains("--force"));
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&run(&forced)), 0);
}

#[test]
fn config_file_supplies_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "[plant]\ndt = 0.02\n\n[run]\nhorizon = 0.5\nsample_every = 0.25\n",
    )
    .unwrap();
    // The file's dt violates the CFL condition on the default grid...
    let bad = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("a").to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("CFL"));
    // ...and a flag overrides the file.
    let good = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--dt",
        "0.005",
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert_eq!(code(&good), 0, "stderr: {}", stderr(&good));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[plant]\ndz = 0.01\n").unwrap();
    let out = run(&[
        "simulate",
        "--config",
        typo.to_str().unwrap(),
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn dataset_generate_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let out = run(&[
        "dataset",
        "generate",
        "--out",
        ds_dir.to_str().unwrap(),
        "--runs",
        "2",
        "--horizon",
        "0.5",
        "--subsample",
        "0.1",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let kds = ds_dir.join("dataset.kds");
    assert!(kds.exists() && ds_dir.join("manifest.toml").exists());

    let csv = dir.path().join("dump.csv");
    let out = run(&[
        "dataset",
        "export-csv",
        "--input",
        kds.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    // 2 runs x 5 samples plus the header.
    assert_eq!(text.lines().count(), 11);

    // Refuses to clobber without --force.
    let out = run(&[
        "dataset",
        "export-csv",
        "--input",
        kds.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    // A corrupted dataset is an input-file error (exit 3).
    let mut bytes = std::fs::read(&kds).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let broken = dir.path().join("broken.kds");
    std::fs::write(&broken, bytes).unwrap();
    let out = run(&[
        "dataset",
        "export-csv",
        "--input",
        broken.to_str().unwrap(),
        "--out",
        dir.path().join("b.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checksum"));
}

#[test]
fn train_inspect_and_bench_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    assert_eq!(
        code(&run(&[
            "dataset",
            "generate",
            "--out",
            ds_dir.to_str().unwrap(),
            "--runs",
            "2",
            "--horizon",
            "1",
            "--subsample",
            "0.5",
        ])),
        0
    );
    let kds = ds_dir.join("dataset.kds");

    let tr_dir = dir.path().join("tr");
    let out = run(&[
        "train",
        "--dataset",
        kds.to_str().unwrap(),
        "--out",
        tr_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--holdout-every",
        "0",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let model = tr_dir.join("model.bkno");
    assert!(model.exists());
    assert!(tr_dir.join("train_report.toml").exists());
    assert!(tr_dir.join("manifest.toml").exists());

    let out = run(&["model", "inspect", "--model", model.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("total parameters: 14848"), "stdout: {text}");
    assert!(text.contains("sensors: 101"));

    let bench_dir = dir.path().join("bench");
    let out = run(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--dataset",
        kds.to_str().unwrap(),
        "--out",
        bench_dir.to_str().unwrap(),
        "--dx",
        "0.01",
        "--dx",
        "0.005",
        "--repeats",
        "2",
        "--inputs",
        "2",
        "--gate",
        "1e9",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(bench_dir.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap() == "dx,analytic_mean_s,no_mean_s,speedup");

    // An untrained model must be rejected by a realistic correctness gate.
    let refused_dir = dir.path().join("refused");
    let out = run(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--dataset",
        kds.to_str().unwrap(),
        "--out",
        refused_dir.to_str().unwrap(),
        "--dx",
        "0.01",
        "--repeats",
        "2",
        "--gate",
        "0.02",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("correctness gate"));
}

#[test]
fn full_pipeline_is_deterministic_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let tr_dir = dir.path().join("tr");
    let sim_dir = dir.path().join("sim");

    let mut artifacts: Vec<(Vec<u8>, Vec<u8>, Vec<u8>, String)> = Vec::new();
    for pass in 0..2 {
        let force: &[&str] = if pass == 0 { &[] } else { &["--force"] };

        let mut args = vec![
            "dataset",
            "generate",
            "--out",
            ds_dir.to_str().unwrap(),
            "--runs",
            "3",
            "--horizon",
            "1",
            "--subsample",
            "0.25",
            "--seed",
            "7",
        ];
        args.extend_from_slice(force);
        assert_eq!(code(&run(&args)), 0);

        let kds = ds_dir.join("dataset.kds");
        let mut args = vec![
            "train",
            "--dataset",
            kds.to_str().unwrap(),
            "--out",
            tr_dir.to_str().unwrap(),
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--seed",
            "5",
            "--model-seed",
            "11",
            "--holdout-every",
            "3",
        ];
        args.extend_from_slice(force);
        assert_eq!(code(&run(&args)), 0);

        let model = tr_dir.join("model.bkno");
        let mut args = vec![
            "simulate",
            "--out",
            sim_dir.to_str().unwrap(),
            "--controller",
            "no-lyapunov",
            "--model",
            model.to_str().unwrap(),
            "--horizon",
            "0.5",
            "--sample-every",
            "0.25",
        ];
        args.extend_from_slice(force);
        let out = run(&args);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

        artifacts.push((
            std::fs::read(ds_dir.join("manifest.toml")).unwrap(),
            std::fs::read(tr_dir.join("manifest.toml")).unwrap(),
            std::fs::read(sim_dir.join("manifest.toml")).unwrap(),
            std::fs::read_to_string(sim_dir.join("scalars.csv")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "dataset manifests differ");
    assert_eq!(artifacts[0].1, artifacts[1].1, "train manifests differ");
    assert_eq!(artifacts[0].2, artifacts[1].2, "simulate manifests differ");

    // Final state norm agrees far inside the 1e-10 reproducibility budget.
    let norm = |text: &str| -> f64 {
        text.lines()
            .last()
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .parse()
            .unwrap()
    };
    let a = norm(&artifacts[0].3);
    let b = norm(&artifacts[1].3);
    assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
}
