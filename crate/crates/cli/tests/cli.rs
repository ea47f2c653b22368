use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bsvie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsvie"))
        .args(args)
        .env_remove("BSVIE_OUT_DIR")
        .output()
        .unwrap()
}

fn write_scenario(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, body).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const DETERMINISTIC: &str =
    "[grid]\nT = 1.0\nn_steps = 20\n[coefficients]\nphi = \"1\"\nbound_C = 1.0\n\
                             [terminal]\nf0 = \"1\"\n[mc]\nn_paths = 4000\nseed = 3\n";

const AFFINE: &str = "[grid]\nT = 1.0\nn_steps = 12\n[levy]\nmarks = [1.0]\nintensities = [2.0]\n\
                      [coefficients]\nphi = \"1\"\nbound_C = 1.0\n\
                      [terminal]\nf0 = \"0\"\nf1 = \"1\"\nf2 = \"1\"\ng = \"2\"\n[mc]\nn_paths = 20000\nseed = 5\n[tol]\nresidual_tol = 0.5\n";

fn run_in(dir: &TempDir, args: &[&str], body: &str) -> (Output, PathBuf) {
    let scenario = write_scenario(dir.path(), body);
    let out = dir.path().join("out");
    let mut full: Vec<&str> = args.to_vec();
    full.extend([
        "--scenario",
        scenario.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    (bsvie(&full), out)
}

#[test]
fn solve_writes_five_files() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, &["solve"], AFFINE);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["k.csv", "manifest.json", "summary.json", "y.csv", "z.csv"]
    );
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["scenario_sha256"].as_str().unwrap().len(), 64);
    assert!(summary["truncation_order"].as_u64().unwrap() >= 1);
    let z = fs::read_to_string(out.join("z.csv")).unwrap();
    assert_eq!(z.lines().next(), Some("t,s,Z"));
    assert_eq!(z.lines().count(), 1 + 13 * 14 / 2);
    let k = fs::read_to_string(out.join("k.csv")).unwrap();
    assert_eq!(k.lines().next(), Some("t,s,mark,K"));
}

#[test]
fn beta_at_minus_one_is_a_domain_error() {
    let dir = TempDir::new().unwrap();
    let body = AFFINE.replace("phi = \"1\"", "phi = \"1\"\nbeta = \"-1\"");
    let (o, out) = run_in(&dir, &["solve"], &body);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta bound"));
    assert!(!out.exists());
}

#[test]
fn missing_scenario_is_an_environment_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = bsvie(&[
        "solve",
        "--scenario",
        "/definitely/not/here.toml",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_table_is_an_environment_error() {
    let dir = TempDir::new().unwrap();
    let body = DETERMINISTIC.replace("phi = \"1\"", "phi = { table = \"absent.csv\" }");
    let (o, _) = run_in(&dir, &["solve"], &body);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn verify_passes_on_deterministic_terminal() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, &["verify"], DETERMINISTIC);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&out.join("report.json"));
    assert_eq!(report["pass"], true);
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall: PASS"));
}

#[test]
fn injected_fault_fails_but_still_writes_report() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, &["verify", "--inject-fault", "z"], DETERMINISTIC);
    assert_eq!(o.status.code(), Some(1));
    let report = json(&out.join("report.json"));
    assert_eq!(report["pass"], false);
    assert_eq!(report["oracle_z"]["pass"], false);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn verify_affine_scenario_with_overrides_and_path_dump() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(
        &dir,
        &[
            "verify",
            "--paths",
            "10000",
            "--seed",
            "9",
            "--dump-paths",
            "3",
        ],
        AFFINE,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&out.join("report.json"));
    assert_eq!(report["n_paths"], 10000);
    assert_eq!(report["seed"], 9);
    assert!(report["oracle_k"]["pass"].as_bool().unwrap());
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["overrides"]["paths"], 10000);
    assert_eq!(manifest["overrides"]["seed"], 9);
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().next(), Some("path,node,t,B,J,M"));
    assert_eq!(paths.lines().count(), 1 + 3 * 13);
}

#[test]
fn resolvent_of_unit_kernel() {
    let dir = TempDir::new().unwrap();
    let body = DETERMINISTIC.replace("n_steps = 20", "n_steps = 200");
    let (o, out) = run_in(&dir, &["resolvent"], &body);
    assert!(o.status.success());
    let summary = json(&out.join("resolvent.json"));
    let psi = summary["psi_0_t"].as_f64().unwrap();
    assert!((psi - 1f64.exp()).abs() < 1e-4, "{psi}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("2.7182"));
    let csv = fs::read_to_string(out.join("psi.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("i,j,t_i,t_j,psi"));
}

#[test]
fn resolvent_of_zero_kernel() {
    let dir = TempDir::new().unwrap();
    let body = DETERMINISTIC.replace("phi = \"1\"\nbound_C = 1.0", "phi = \"0\"\nbound_C = 0.0");
    let (o, out) = run_in(&dir, &["resolvent"], &body);
    assert!(o.status.success());
    assert_eq!(json(&out.join("resolvent.json"))["truncation_order"], 1);
    let csv = fs::read_to_string(out.join("psi.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
    }
}

#[test]
fn convergence_sweep_fits_second_order() {
    let dir = TempDir::new().unwrap();
    let body = DETERMINISTIC.replace(
        "phi = \"1\"\nbound_C = 1.0",
        "phi = \"1 + t*s\"\nbound_C = 2.0",
    );
    let (o, out) = run_in(&dir, &["convergence", "--residual-paths", "0"], &body);
    assert!(o.status.success());
    let study = json(&out.join("convergence.json"));
    let slope = study["resolvent_slope"]["slope"].as_f64().unwrap();
    assert!((slope - 2.0).abs() <= 0.3, "{slope}");
    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn rerun_reproduces_and_detects_tampering() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_in(&dir, &["solve", "--grid-steps", "8"], AFFINE);
    assert!(o.status.success());
    let manifest = out.join("manifest.json");
    let again = dir.path().join("again");
    let r = bsvie(&[
        "rerun",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["y.csv", "z.csv", "k.csv", "summary.json"] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }

    let mut m = json(&manifest);
    m["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let r = bsvie(&[
        "rerun",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path(), DETERMINISTIC);
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_bsvie"))
        .args(["solve", "--scenario", scenario.to_str().unwrap()])
        .env("BSVIE_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(target.join("y.csv").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let scenario = write_scenario(dir.path(), AFFINE);
    let mut outputs = Vec::new();
    for (threads, name) in [("1", "a"), ("4", "b")] {
        let out = dir.path().join(name);
        let o = bsvie(&[
            "--threads",
            threads,
            "verify",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.code().is_some());
        outputs.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
