use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_stokes-rve");

fn config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn cell(lambda: f64, extra: &str) -> String {
    format!(
        "mode = \"effective\"\n\n[geometry]\ndim = 2\ncell_length = 8.0\nlambda = {lambda}\ngap = 0.5\nseeds = [0]\n\n[grid]\nn = 32\n{extra}"
    )
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_without_inclusions_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &cell(0.0, ""));
    let out = tmp.path().join("out");
    let o = run(&["validate", "--config", path(&cfg), "--out", path(&out)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("PASS seed 0: B = Id without inclusions"), "{stdout}");
    assert!(out.join("validate.txt").exists());
}

#[test]
fn missing_grid_size_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &cell(0.1, "").replace("n = 32\n", ""));
    let o = run(&["effective", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.n"));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let o = run(&["effective", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn effective_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &cell(0.1, ""));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = run(&["effective", "--config", path(&cfg), "--out", path(d)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ca = std::fs::read(a.join("effective.csv")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("effective.csv")).unwrap());
    let text = String::from_utf8(ca).unwrap();
    assert!(text.starts_with("seed,L,N,lambda,B_11,B_12,B_21,B_22,b_1,b_2,res_force,res_torque,iters\n"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn manifest_echoes_config_and_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &cell(0.1, ""));
    let out = tmp.path().join("out");
    let o = run(&["effective", "--config", path(&cfg), "--seed-override", "5", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["geometry"]["seeds"], serde_json::json!([5]));
    assert_eq!(m["config"]["grid"]["n"], 32);
    let arts = m["artifacts"].as_array().unwrap();
    assert!(!arts.is_empty());
    for a in arts {
        let file = a["file"].as_str().unwrap();
        let bytes = std::fs::read(out.join(file)).unwrap();
        assert_eq!(a["sha256"].as_str().unwrap(), sha256_hex(&bytes), "{file}");
    }
    let csv = std::fs::read_to_string(out.join("effective.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("5,8,32,"));
}

#[test]
fn solver_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &cell(0.1, "\n[solver]\nmax_iter = 2\n"));
    let o = run(&["effective", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_invariant_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    // a loose tolerance leaves residuals far above the energy identity bound
    let cfg = config(tmp.path(), &cell(0.1, "\n[solver]\ntol = 0.1\n"));
    let o = run(&["validate", "--config", path(&cfg), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
