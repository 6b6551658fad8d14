use stokes_rve::config::RunConfig;
use stokes_rve::runner::{run, RunError};

fn config(dir: &std::path::Path, mode: &str, extra: &str) -> RunConfig {
    let text = format!(
        r#"
mode = "{mode}"

[geometry]
dim = 2
cell_length = 8.0
lambda = 0.1
gap = 0.3
seeds = [0, 1]

[grid]
n = 32

[output]
dir = "{}"
{extra}
"#,
        dir.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn effective_mode_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config(dir.path(), "effective", "")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("effective.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("seed,L,N,lambda,B_11"));
    assert!(dir.path().join("manifest.json").exists());
    assert!(out.artifacts.iter().any(|p| p.ends_with("effective.json")));
}

#[test]
fn ensemble_mode_reports_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    run(&config(dir.path(), "ensemble", "[ensemble]\ncell_lengths = [8.0, 16.0]\n")).unwrap();
    let table = std::fs::read_to_string(dir.path().join("ensemble.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let all = std::fs::read_to_string(dir.path().join("effective.csv")).unwrap();
    assert_eq!(all.lines().count(), 5);
}

#[test]
fn validate_mode_passes_on_a_small_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config(dir.path(), "validate", "")).unwrap();
    assert!(!out.checks.is_empty());
    assert!(out.checks.iter().all(|c| c.passed));
}

#[test]
fn iteration_cap_is_a_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&config(dir.path(), "effective", "[solver]\nmax_iter = 3\n")).unwrap_err();
    assert!(matches!(err, RunError::Module { .. }));
    assert_eq!(err.exit_code(), 3);
}
