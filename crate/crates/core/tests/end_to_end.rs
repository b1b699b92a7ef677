use std::fs;
use std::path::Path;
use std::process::Command;

use tvsysid::experiment::{
    emit_plot_data, execute_with, load_records, run_experiment, write_records, Execution, ExperimentConfig, Method,
};

fn short(methods: Vec<Method>, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        n_runs: 2,
        total_samples: 600,
        checkpoints: vec![300, 450, 600],
        methods,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn noiseless_single_run_fits_well() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        n_runs: 1,
        methods: vec![Method::TcFf],
        noise_scale: 0.0,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let records = run_experiment(&cfg).unwrap();
    let last = records[0].trace("tc_ff").unwrap().at(3000).unwrap();
    assert!(last >= 90.0, "final fit {last}");
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(vec![Method::TcFf, Method::TcEstFf, Method::RlsFf], dir.path());
    let seq = execute_with(&cfg, Execution::Sequential).unwrap();
    let par = execute_with(&cfg, Execution::Parallel { threads: 3 }).unwrap();
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
    }
}

#[test]
fn records_survive_a_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(vec![Method::TcFf, Method::RlsFf], dir.path());
    let records = execute_with(&cfg, Execution::Sequential).unwrap();
    write_records(&records, dir.path()).unwrap();
    let loaded = load_records(dir.path()).unwrap();
    assert_eq!(loaded, records);

    let summary = emit_plot_data(&loaded, &cfg.methods, &cfg.checkpoints, dir.path()).unwrap();
    assert_eq!(summary.fits.len(), 2 * 3);
    let long = fs::read_to_string(dir.path().join("fits_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 2 * 3 * 2);
}

#[test]
fn faults_do_not_abort_the_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        noise_scale: 0.0,
        ..short(vec![Method::TcFf, Method::TcEstFf], dir.path())
    };
    let records = run_experiment(&cfg).unwrap();
    for r in &records {
        for t in &r.fit_traces {
            assert_eq!(t.checkpoints.len(), 3);
        }
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tvsysid"))
}

#[test]
fn cli_run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    let status = cli()
        .args(["run", "--runs", "1", "--methods", "tc_ff,rls_ff", "--checkpoints", "300,1000,3000", "--seed", "4"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["run_4.json", "timing_4.json", "summary.csv", "summary.json", "fits_long.csv", "times.csv", "config.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read_to_string(out.join("times.csv")).unwrap().lines().next(),
        Some("stat,tc_ff,rls_ff")
    );

    let fits = fs::read(out.join("fits_long.csv")).unwrap();
    fs::remove_file(out.join("fits_long.csv")).unwrap();
    let report = cli()
        .arg("report")
        .arg("--config")
        .arg(out.join("config.toml"))
        .output()
        .unwrap();
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    assert_eq!(fs::read(out.join("fits_long.csv")).unwrap(), fits);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "n_runs = \"many\"\n").unwrap();
    let code = |args: &[&str]| cli().args(args).output().unwrap().status.code();
    assert_eq!(code(&["run", "--config", bad.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["run", "--runs", "0"]), Some(2));
    assert_eq!(code(&["run", "--checkpoints", "305"]), Some(2));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["report", "--out", empty.to_str().unwrap()]), Some(3));
    assert_eq!(code(&["report", "--out", dir.path().join("absent").to_str().unwrap()]), Some(3));
}

#[test]
fn cli_validate_passes() {
    let out = cli().arg("validate").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 4);
}

#[test]
fn cli_demo_traces_hyper_parameters() {
    let out = cli()
        .args(["demo", "--seed", "2", "--methods", "tc_est_ff", "--checkpoints", "300,600", "--every", "5"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    assert!(text.lines().any(|l| l.contains("γ=") && l.contains("λ=")));
}
