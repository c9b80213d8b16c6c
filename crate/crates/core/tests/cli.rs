//! End-to-end checks of the `fluxlab` binary: exit codes, overrides and
//! reproducible outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_BOUNDARY: &str = r#"
experiment = "boundary_flux"
n_paths = 2000
master_seed = 31

[model]
kind = "constant_drift"
velocity = [1.0, 0.0, 0.0]
initial_mean = [0.0, 0.0, 0.0]
initial_variance = 0.25

[domain]
kind = "ball"
radius = 1.0

[grid]
t_start = 0.0
t_end = 1.0
dt = 0.01

[tolerances]
extra_tolerance = 0.01
"#;

fn fluxlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluxlab"))
        .args(args)
        .env_remove("FLUXLAB_THREADS")
        .output()
        .expect("spawn fluxlab")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn passing_run_exits_zero_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", SMALL_BOUNDARY);
    let out_dir = dir.path().join("out");
    let out = fluxlab(&["run", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] mc_vs_flux_integral t_b=1"), "{stdout}");
    let csv = fs::read_to_string(out_dir.join("boundary_flux.csv")).unwrap();
    assert!(csv.starts_with("t_b,mc_mean,mc_se,oracle,verdict\n"));
    assert!(out_dir.join("report.txt").exists());
}

#[test]
fn failed_verdict_exits_one() {
    // a horizon of 0.2 leaves most mass inside the ball, so a 1e-6 truncation
    // tolerance cannot hold
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_BOUNDARY
        .replace("t_end = 1.0", "t_end = 0.2")
        .replace("extra_tolerance = 0.01", "extra_tolerance = 0.01\ntruncation_tol = 1e-6");
    let cfg = write(dir.path(), "fail.toml", &text);
    let out = fluxlab(&["run", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] truncation"));
}

#[test]
fn tiny_run_without_allowance_reports_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_BOUNDARY
        .replace("n_paths = 2000", "n_paths = 100")
        .replace("extra_tolerance = 0.01", "extra_tolerance = 0.0");
    let cfg = write(dir.path(), "tiny.toml", &text);
    let out = fluxlab(&["run", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert!(matches!(code(&out), 0 | 1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mc_vs_flux_integral"));
}

#[test]
fn config_errors_exit_two_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL_BOUNDARY.replace("master_seed = 31\n", "").replace("dt = 0.01", "dt = -0.01");
    let cfg = write(dir.path(), "bad.toml", &text);
    for cmd in ["validate", "run"] {
        let out = fluxlab(&[cmd, s(&cfg)]);
        assert_eq!(code(&out), 2);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("master_seed"), "{err}");
        assert!(err.contains("line 18"), "{err}");
    }
    assert_eq!(code(&fluxlab(&["validate", s(&dir.path().join("missing.toml"))])), 2);
}

#[test]
fn ray_from_time_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
experiment = "limiting_velocity"
n_paths = 1000
master_seed = 1

[model]
kind = "ray"
t0 = 0.0
initial_mean = [1.0, 0.0, 0.0]
initial_variance = 0.1

[grid]
t_start = 0.0
t_end = 10.0
dt = 0.01
checkpoints = [10.0]
"#;
    let cfg = write(dir.path(), "ray.toml", text);
    let out = fluxlab(&["validate", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("drift singular at t=0"));
}

#[test]
fn bad_overrides_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", SMALL_BOUNDARY);
    assert_eq!(code(&fluxlab(&["run", s(&cfg), "--paths", "50"])), 2);
    assert_eq!(code(&fluxlab(&["run", s(&cfg), "--threads", "0"])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_fluxlab"))
        .args(["run", s(&cfg)])
        .env("FLUXLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn faults_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // the output directory sits below a regular file
    let cfg = write(dir.path(), "ok.toml", SMALL_BOUNDARY);
    let blocker = write(dir.path(), "blocker", "");
    let out = fluxlab(&["run", s(&cfg), "--out", s(&blocker.join("out"))]);
    assert_eq!(code(&out), 3);

    // an explosive affine drift overflows within a few steps
    let text = SMALL_BOUNDARY.replace(
        "kind = \"constant_drift\"\nvelocity = [1.0, 0.0, 0.0]",
        "kind = \"affine\"\nmatrix = [[1e200, 0.0, 0.0], [0.0, 1e200, 0.0], [0.0, 0.0, 1e200]]",
    );
    let cfg = write(dir.path(), "blowup.toml", &text);
    let out = fluxlab(&["run", s(&cfg), "--out", s(&dir.path().join("blowup"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn outputs_do_not_depend_on_threads_and_seed_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", SMALL_BOUNDARY);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&fluxlab(&["run", s(&cfg), "--out", s(&a), "--threads", "1"])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_fluxlab"))
        .args(["run", s(&cfg), "--out", s(&b)])
        .env("FLUXLAB_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    for name in ["boundary_flux.csv", "report.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    fluxlab(&["run", s(&cfg), "--out", s(&c), "--seed", "32"]);
    assert_ne!(
        fs::read(a.join("boundary_flux.csv")).unwrap(),
        fs::read(c.join("boundary_flux.csv")).unwrap()
    );
}

#[test]
fn validate_prints_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", SMALL_BOUNDARY);
    let out = fluxlab(&["validate", s(&cfg)]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["master_seed = 31", "time_order = 16", "surface_order = 48", "sigmas = 3.0"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}
