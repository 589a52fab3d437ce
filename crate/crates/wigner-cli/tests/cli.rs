//! End-to-end runs of the binary: every subcommand once, plus the
//! documented exit codes on bad input.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wigner"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("wigner-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(dir: &PathBuf, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

const GUE: &str = r#"{"type": "gue", "alpha": 1.0}"#;
const GAUSSIAN_SPEC: &str = r#"{"alpha": 1.0, "perturbations": []}"#;

#[test]
fn sample_and_spectrum_and_moments() {
    let dir = workdir("sample");
    let ensemble = write(&dir, "gue.json", GUE);

    let out = dir.join("mats");
    let status = bin()
        .args(["sample", "--ensemble"])
        .arg(&ensemble)
        .args(["--n", "8", "--seed", "3", "--count", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("sample_0000.mat").exists());
    assert!(out.join("manifest.json").exists());

    let csv = dir.join("spectrum.csv");
    let status = bin()
        .args(["spectrum", "--ensemble"])
        .arg(&ensemble)
        .args(["--n", "16", "--count", "4", "--bins", "21", "--out"])
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.contains("green_boundary_density"));

    let out = dir.join("moments");
    let output = bin()
        .args(["moments", "--ensemble"])
        .arg(&ensemble)
        .args(["--n", "16", "--count", "8", "--k", "2,4", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("semicircle"));
    assert!(out.join("moments_n16.csv").exists());

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn check_cumulants_oracle_flow() {
    let dir = workdir("analytic");
    let spec = write(&dir, "spec.json", GAUSSIAN_SPEC);

    let report = dir.join("report.json");
    let output = bin()
        .args(["check-cumulants", "--spec"])
        .arg(&spec)
        .args(["--max-vertices", "3", "--max-edges", "3", "--n-grid", "16,32,64", "--out"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).starts_with("PASS"));

    let csv = dir.join("oracle.csv");
    let output = bin()
        .args(["oracle", "--spec"])
        .arg(&spec)
        .args(["--n", "2,3,4", "--k", "2,4", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(fs::read_to_string(&csv).unwrap().contains("N,k,exact,extrapolated"));

    let flow_dir = dir.join("flow");
    let output = bin()
        .args(["flow", "--spec"])
        .arg(&spec)
        .args(["--orders", "3", "--truncation", "4,4", "--out"])
        .arg(&flow_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("1/z^3: 1"), "stdout: {stdout}");
    assert!(flow_dir.join("green_series.csv").exists());
    assert!(flow_dir.join("propagation_ledger.json").exists());

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn convergence_runs_from_config() {
    let dir = workdir("conv");
    let config = write(
        &dir,
        "config.json",
        r#"{
            "ensemble": {"type": "gue", "alpha": 1.0},
            "n_grid": [4, 8],
            "samples_per_n": 3,
            "moments": [2, 4],
            "seed": 5,
            "bins": 11
        }"#,
    );
    let out = dir.join("out");
    let output = bin()
        .args(["convergence", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("KS distance"));
    assert!(out.join("summary.json").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exit_codes() {
    let dir = workdir("codes");

    // invalid config -> 2
    let bad = write(&dir, "bad.json", r#"{"type": "gue", "alpha": -1.0}"#);
    let status = bin()
        .args(["sample", "--ensemble"])
        .arg(&bad)
        .args(["--n", "4", "--out"])
        .arg(dir.join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // unparseable spec -> 2
    let garbled = write(&dir, "garbled.json", "{nope");
    let status = bin()
        .args(["oracle", "--spec"])
        .arg(&garbled)
        .args(["--out"])
        .arg(dir.join("o.csv"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // enumeration budget -> 4
    let spec = write(&dir, "spec.json", GAUSSIAN_SPEC);
    let status = bin()
        .args(["oracle", "--spec"])
        .arg(&spec)
        .args(["--n", "50,60", "--k", "8", "--out"])
        .arg(dir.join("o.csv"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    // clap usage error -> 2
    let status = bin().arg("no-such-command").status().unwrap();
    assert_eq!(status.code(), Some(2));

    fs::remove_dir_all(&dir).unwrap();
}
