use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eki_core::ProblemInstance;

fn eki(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eki"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EKI_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn generate_writes_a_loadable_default_problem() {
    let dir = tempfile::tempdir().unwrap();
    let out = eki(&["generate"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let inst = ProblemInstance::load(dir.path().join("problem.json")).unwrap();
    assert_eq!((inst.obs.n(), inst.obs.d(), inst.ens0.size()), (8, 12, 5));
    assert_eq!(inst.spec.seed, 42);
}

#[test]
fn single_particle_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        eki(&["generate", "--J", "1"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(eki(&["run", "--J", "1"], dir.path()).status.code(), Some(2));
}

#[test]
fn trace_has_one_row_per_particle_and_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = eki(&["run", "--iters", "20", "--out", "o"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let o = dir.path().join("o");
    assert_eq!(rows(&o.join("trace.csv")), 21 * 5);
    let header = fs::read_to_string(o.join("trace.csv")).unwrap();
    assert!(
        header.starts_with("iter,particle,variant,P_theta,Q_theta,N_theta,P_omega,Q_omega,N_omega")
    );
    // r = 4 populated eigenvalues per recorded iteration.
    assert_eq!(rows(&o.join("eigenvalues.csv")), 21 * 4);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o.join("report.json")).unwrap()).unwrap();
    assert!(report
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["pass"].as_bool().unwrap()));
}

#[test]
fn replications_write_one_trace_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = eki(
        &[
            "run",
            "--variant",
            "stochastic",
            "--iters",
            "10",
            "--replications",
            "3",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let o = dir.path().join("o");
    for k in 1..3 {
        assert_eq!(rows(&o.join(format!("trace_rep{k}.csv"))), 11 * 5);
    }
    assert_ne!(
        fs::read(o.join("trace_rep1.csv")).unwrap(),
        fs::read(o.join("trace_rep2.csv")).unwrap()
    );
    assert!(o.join("slopes.csv").exists());
}

#[test]
fn verify_with_absurd_tolerance_reports_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    eki(&["generate"], dir.path());
    let ok = eki(&["verify", "problem.json", "--iters", "10"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.contains("obs_projector_idempotency"));
    let bad = eki(
        &["verify", "problem.json", "--iters", "10", "--tol", "1e-30"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn corrupted_checksum_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    eki(&["generate"], dir.path());
    let path = dir.path().join("problem.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["checksum"] = serde_json::json!("00");
    fs::write(&path, v.to_string()).unwrap();
    assert_eq!(
        eki(&["verify", "problem.json"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        eki(&["run", "--problem", "problem.json"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_problem_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        eki(&["verify", "absent.json"], dir.path()).status.code(),
        Some(3)
    );
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eki"))
        .args(["run", "--iters", "3"])
        .current_dir(dir.path())
        .env("EKI_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-env/trace.csv").exists());
}

#[test]
fn emit_subset_skips_other_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = eki(
        &["run", "--iters", "3", "--out", "o", "--emit", "report"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let o = dir.path().join("o");
    assert!(o.join("report.json").exists());
    assert!(!o.join("trace.csv").exists());
    assert!(!o.join("eigenvalues.csv").exists());
}

#[test]
fn idealized_variant_runs_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    eki(&["generate", "--seed", "7", "-o", "p.json"], dir.path());
    let out = eki(
        &[
            "run",
            "--problem",
            "p.json",
            "--variant",
            "idealized",
            "--iters",
            "30",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(dir.path().join("o/trace.csv")).unwrap();
    assert!(trace.lines().nth(1).unwrap().contains("idealized"));
    assert_eq!(trace.lines().count() - 1, 31 * 5);
}
