use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_acgrac"));
    c.env("RUST_LOG", "warn");
    c
}

fn scratch(name: &str, text: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("acgrac-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_key_is_reported_as_json() {
    let cfg = scratch("unknown", "problem = divacancy\nadapt.bogus = 3\n");
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "unknown_key");
    assert!(err["message"].as_str().unwrap().contains("adapt.bogus"));
}

#[test]
fn bad_variant_and_missing_file() {
    let cfg = scratch("variant", "problem = divacancy\n");
    let out = bin().args(["run", "--variant", "l3s1", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "invalid_value");

    let out = bin().args(["reference", "--config", "/nonexistent/acgrac.cfg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn small_run_writes_outputs() {
    let cfg = scratch(
        "run",
        "problem = divacancy\nmesh.R0 = 16\nadapt.R_max = 16\nadapt.N_max = 500\nreference.enabled = false\ncache.dir = cache\n",
    );
    let dir = cfg.parent().unwrap().to_path_buf();
    let out = bin().args(["run", "--variant", "l1s0", "--out"]).arg(dir.join("out")).arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("divacancy l1s0"));
    let csv = std::fs::read_to_string(dir.join("out/trace_l1s0.csv")).unwrap();
    assert!(csv.starts_with("step,N,R,eta_T,eta_M,eta_C,rho,h1_err,energy_err,seconds\n"));
    assert!(dir.join("out/summary_l1s0.json").exists());
    // relative cache dir resolves next to the config
    assert!(dir.join("cache/params").is_dir());
}

#[test]
fn verify_passes() {
    let out = bin().args(["verify", "--json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 8);
}
