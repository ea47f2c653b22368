use std::fs;
use std::path::{Path, PathBuf};

use bsvie_core::output::{solution_files, write_paths, write_psi};
use bsvie_core::resolvent::{neumann_resolvent, resolvent_residual};
use bsvie_core::scenario::ScenarioConfig;
use bsvie_core::simulate::{girsanov_weights, simulate_paths};
use bsvie_core::solver::{compute_u, solve};
use bsvie_core::verify::{
    convergence_study, verify_scenario, ConvergenceStudy, Fault, OracleSummary, VerifyOptions,
};
use bsvie_core::{Scenario, VerificationReport};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{
    now_unix, scenario_hash, sha256_hex, OutputFile, RunManifest, MANIFEST_FILE,
};
use crate::table::{sci, verdict, Table};

/// Command-line replacements for scenario fields.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of grid steps.
    #[arg(long)]
    pub grid_steps: Option<usize>,
    /// Neumann truncation tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(p) = self.paths {
            cfg.mc.n_paths = p;
        }
        if let Some(seed) = self.seed {
            cfg.mc.seed = seed;
        }
        if let Some(n) = self.grid_steps {
            cfg.grid.n_steps = n;
        }
        if let Some(tol) = self.tol {
            cfg.tol.neumann_tol = tol;
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultArg {
    Z,
    K,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::Z => Fault::Z,
            FaultArg::K => Fault::K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Solve,
    Verify {
        inject_fault: Option<FaultArg>,
        dump_paths: Option<usize>,
    },
    Resolvent,
    Convergence {
        levels: Vec<usize>,
        residual_paths: usize,
    },
}

struct Outcome {
    files: Vec<(String, Vec<u8>)>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct SolveSummary {
    scenario_sha256: String,
    horizon: f64,
    n_steps: usize,
    n_marks: usize,
    bound_c: f64,
    truncation_order: usize,
    tail_bound: f64,
    resolvent_identity_residual: f64,
    conditional_u_defect: f64,
    max_abs_z: f64,
    max_abs_k: f64,
}

#[derive(Serialize)]
struct ResolventSummary {
    scenario_sha256: String,
    truncation_order: usize,
    tail_bound: f64,
    bound_c: f64,
    identity_residual: f64,
    psi_0_t: f64,
}

fn json(value: &impl Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("summary serializes");
    v.push(b'\n');
    v
}

fn run_job(s: &Scenario, job: &Job) -> Result<Outcome, CliError> {
    match job {
        Job::Solve => solve_job(s),
        Job::Verify {
            inject_fault,
            dump_paths,
        } => verify_job(s, inject_fault.map(Fault::from), *dump_paths),
        Job::Resolvent => resolvent_job(s),
        Job::Convergence {
            levels,
            residual_paths,
        } => convergence_job(s, levels, *residual_paths),
    }
}

fn solve_job(s: &Scenario) -> Result<Outcome, CliError> {
    let table = neumann_resolvent(&s.coeffs.phi, s.coeffs.bound_c, s.tol.neumann_tol)?;
    let identity = resolvent_residual(&s.coeffs.phi, &table.psi)?;
    let triplet = solve(s, &table)?;
    let u = compute_u(s, &triplet.y);
    let defect = u
        .conditional(&triplet.y.tails)
        .iter()
        .map(|c| c.max_abs())
        .fold(0.0, f64::max);
    let summary = SolveSummary {
        scenario_sha256: scenario_hash(s),
        horizon: s.grid.horizon(),
        n_steps: s.grid.n_steps(),
        n_marks: s.n_marks(),
        bound_c: s.coeffs.bound_c,
        truncation_order: table.n_terms,
        tail_bound: table.tail_bound,
        resolvent_identity_residual: identity,
        conditional_u_defect: defect,
        max_abs_z: triplet.z.max_abs(),
        max_abs_k: triplet.k.iter().map(|k| k.max_abs()).fold(0.0, f64::max),
    };
    let mut t = Table::new(&["quantity", "value"]);
    t.row(["truncation order N".to_string(), table.n_terms.to_string()]);
    t.row(["tail bound".to_string(), sci(table.tail_bound)]);
    t.row(["resolvent identity residual".to_string(), sci(identity)]);
    t.row(["max |E[U(t) | F_t]| coefficient".to_string(), sci(defect)]);
    t.row(["max |Z|".to_string(), sci(summary.max_abs_z)]);
    t.row(["max |K|".to_string(), sci(summary.max_abs_k)]);
    print!("{t}");

    let mut files: Vec<(String, Vec<u8>)> = solution_files(&triplet, &s.levy.marks)
        .map_err(|e| CliError::Environment(e.to_string()))?
        .into_iter()
        .map(|(name, bytes)| (name.to_string(), bytes))
        .collect();
    files.push(("summary.json".into(), json(&summary)));
    Ok(Outcome {
        files,
        failure: None,
    })
}

fn oracle_row(t: &mut Table, name: &str, o: &OracleSummary) {
    t.row([
        name.to_string(),
        format!("{}/{} outside", o.n_outside, o.n_nodes),
        format!(
            "max err {} (SE {})",
            sci(o.max_abs_error),
            sci(o.std_error_at_max)
        ),
        verdict(o.pass).to_string(),
    ]);
}

fn print_report(r: &VerificationReport) {
    let mut t = Table::new(&["check", "estimate", "reference", "status"]);
    for c in &r.martingale {
        t.row([
            c.name.clone(),
            format!("{:.6} +- {}", c.estimate, sci(c.std_error)),
            format!("{:.6}", c.target),
            verdict(c.pass).to_string(),
        ]);
    }
    t.row([
        "residual rms".to_string(),
        format!(
            "{} +- {}",
            sci(r.residual.stats.rms),
            sci(r.residual.stats.rms_std_error)
        ),
        format!("<= {}", sci(r.residual.tolerance)),
        verdict(r.residual.pass).to_string(),
    ]);
    t.row([
        "P/Q residual gap".to_string(),
        sci(r.residual.stats.pq_max_relative_gap),
        format!("<= {}", sci(bsvie_core::verify::PQ_RELATIVE_TOL)),
        verdict(r.residual.stats.pq_max_relative_gap <= bsvie_core::verify::PQ_RELATIVE_TOL)
            .to_string(),
    ]);
    oracle_row(&mut t, "Z oracle", &r.oracle_z);
    if let Some(k) = &r.oracle_k {
        oracle_row(&mut t, "K oracle", k);
    }
    print!("{t}");
    for w in [
        &r.oracle_z.warning,
        &r.oracle_k.as_ref().and_then(|k| k.warning.clone()),
    ]
    .into_iter()
    .flatten()
    {
        eprintln!("warning: {w}");
    }
    println!("overall: {}", verdict(r.pass));
}

fn verify_job(
    s: &Scenario,
    fault: Option<Fault>,
    dump: Option<usize>,
) -> Result<Outcome, CliError> {
    let report = verify_scenario(
        s,
        &VerifyOptions {
            fault,
            ..Default::default()
        },
    )?;
    print_report(&report);
    let mut files = vec![("report.json".to_string(), json(&report))];
    if let Some(limit) = dump {
        let paths = simulate_paths(s);
        let weights = girsanov_weights(s, &paths)?;
        let mut buf = Vec::new();
        write_paths(&mut buf, &paths, &weights, limit)
            .map_err(|e| CliError::Environment(e.to_string()))?;
        files.push(("paths.csv".into(), buf));
    }
    let failure = (!report.pass).then(|| "verification failed".to_string());
    Ok(Outcome { files, failure })
}

fn resolvent_job(s: &Scenario) -> Result<Outcome, CliError> {
    let table = neumann_resolvent(&s.coeffs.phi, s.coeffs.bound_c, s.tol.neumann_tol)?;
    let identity = resolvent_residual(&s.coeffs.phi, &table.psi)?;
    let n = s.grid.n_steps();
    println!(
        "N = {}  tail bound = {}  identity residual = {}",
        table.n_terms,
        sci(table.tail_bound),
        sci(identity)
    );
    let mut t = Table::new(&["r", "Psi(0,r)"]);
    let stride = n.div_ceil(10).max(1);
    for j in (0..=n)
        .step_by(stride)
        .chain((!n.is_multiple_of(stride)).then_some(n))
    {
        t.row([
            format!("{:.4}", s.grid.node(j)),
            format!("{:.6}", table.psi.get(0, j)),
        ]);
    }
    print!("{t}");
    let summary = ResolventSummary {
        scenario_sha256: scenario_hash(s),
        truncation_order: table.n_terms,
        tail_bound: table.tail_bound,
        bound_c: table.bound_c,
        identity_residual: identity,
        psi_0_t: table.psi.get(0, n),
    };
    let mut psi = Vec::new();
    write_psi(&mut psi, &table.psi).map_err(|e| CliError::Environment(e.to_string()))?;
    Ok(Outcome {
        files: vec![
            ("psi.csv".into(), psi),
            ("resolvent.json".into(), json(&summary)),
        ],
        failure: None,
    })
}

fn slope_cell(f: &Option<bsvie_core::stats::SlopeFit>) -> String {
    match f {
        Some(f) => format!("{:.3} (R2 {:.4})", f.slope, f.r_squared),
        None => "n/a".into(),
    }
}

fn convergence_csv(study: &ConvergenceStudy) -> Vec<u8> {
    let mut out = String::from(
        "n_steps,dt,resolvent_residual,method_gap,conditional_u_defect,residual_rms,residual_rms_se\n",
    );
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.16e}")).unwrap_or_default();
    for r in &study.rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.n_steps,
            r.dt,
            r.resolvent_residual,
            r.method_gap,
            r.conditional_u_defect,
            opt(r.residual_rms),
            opt(r.residual_rms_std_error)
        ));
    }
    out.into_bytes()
}

fn convergence_job(
    s: &Scenario,
    levels: &[usize],
    residual_paths: usize,
) -> Result<Outcome, CliError> {
    let paths = (residual_paths > 0).then_some(residual_paths);
    let study = convergence_study(s.config(), s.base_dir(), levels, paths)?;
    let mut t = Table::new(&[
        "n_steps",
        "resolvent residual",
        "method gap",
        "U defect",
        "residual rms",
    ]);
    for r in &study.rows {
        t.row([
            r.n_steps.to_string(),
            sci(r.resolvent_residual),
            sci(r.method_gap),
            sci(r.conditional_u_defect),
            r.residual_rms.map(sci).unwrap_or_else(|| "-".into()),
        ]);
    }
    t.row([
        "slope".to_string(),
        slope_cell(&study.resolvent_slope),
        slope_cell(&study.method_gap_slope),
        slope_cell(&study.conditional_u_slope),
        slope_cell(&study.residual_slope),
    ]);
    print!("{t}");
    Ok(Outcome {
        files: vec![
            ("convergence.csv".into(), convergence_csv(&study)),
            ("convergence.json".into(), json(&study)),
        ],
        failure: None,
    })
}

fn write_outputs(out_dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<OutputFile>, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    files
        .iter()
        .map(|(name, bytes)| {
            let path = out_dir.join(name);
            fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            Ok(OutputFile {
                path: PathBuf::from(name),
                sha256: sha256_hex(bytes),
            })
        })
        .collect()
}

fn finish(
    s: &Scenario,
    out_dir: &Path,
    mut manifest: RunManifest,
    outcome: Outcome,
) -> Result<(RunManifest, Option<String>), CliError> {
    manifest.outputs = write_outputs(out_dir, &outcome.files)?;
    manifest.scenario_sha256 = scenario_hash(s);
    manifest.finished_unix = now_unix();
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, json(&manifest)).map_err(|e| CliError::io(&path, e))?;
    Ok((manifest, outcome.failure))
}

fn fail_on(failure: Option<String>) -> Result<(), CliError> {
    match failure {
        Some(msg) => Err(CliError::Failed(msg)),
        None => Ok(()),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn execute(
    scenario_path: &Path,
    out_dir: &Path,
    overrides: Overrides,
    job: Job,
) -> Result<(), CliError> {
    let started = now_unix();
    let text = fs::read_to_string(scenario_path).map_err(|e| CliError::io(scenario_path, e))?;
    let scenario_dir = absolute(scenario_path.parent().unwrap_or(Path::new(".")));
    let mut cfg =
        ScenarioConfig::from_toml(&text).map_err(|e| CliError::scenario(e, &scenario_dir))?;
    overrides.apply(&mut cfg);
    let resolved = cfg.to_toml();
    let s = Scenario::from_config(cfg, &scenario_dir)
        .map_err(|e| CliError::scenario(e, &scenario_dir))?;
    let outcome = run_job(&s, &job)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        job,
        scenario_path: absolute(scenario_path),
        scenario_dir,
        scenario_sha256: String::new(),
        resolved_scenario: resolved,
        overrides,
        seed: s.mc.seed,
        n_paths: s.mc.n_paths,
        outputs: Vec::new(),
        started_unix: started,
        finished_unix: 0.0,
    };
    let (_, failure) = finish(&s, out_dir, manifest, outcome)?;
    fail_on(failure)
}

/// Re-run from a manifest and compare every recorded output by hash.
pub fn rerun(manifest_path: &Path, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let started = now_unix();
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::io(manifest_path, e))?;
    let recorded: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Domain(format!("{}: {e}", manifest_path.display())))?;
    let out_dir = out_dir.unwrap_or_else(|| {
        manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("rerun")
    });
    let cfg = ScenarioConfig::from_toml(&recorded.resolved_scenario)
        .map_err(|e| CliError::scenario(e, &recorded.scenario_dir))?;
    let s = Scenario::from_config(cfg, &recorded.scenario_dir)
        .map_err(|e| CliError::scenario(e, &recorded.scenario_dir))?;
    let outcome = run_job(&s, &recorded.job)?;
    let manifest = RunManifest {
        started_unix: started,
        outputs: Vec::new(),
        ..recorded.clone()
    };
    let (produced, failure) = finish(&s, &out_dir, manifest, outcome)?;

    let mut mismatched = Vec::new();
    if produced.scenario_sha256 != recorded.scenario_sha256 {
        mismatched.push("scenario".to_string());
    }
    for want in &recorded.outputs {
        match produced.outputs.iter().find(|o| o.path == want.path) {
            Some(got) if got.sha256 == want.sha256 => {
                println!("{}  reproduced", want.path.display());
            }
            _ => mismatched.push(want.path.display().to_string()),
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Failed(format!(
            "rerun differs from manifest: {}",
            mismatched.join(", ")
        )));
    }
    fail_on(failure)
}
