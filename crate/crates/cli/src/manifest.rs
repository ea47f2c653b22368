use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use bsvie_core::Scenario;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jobs::{Job, Overrides};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub job: Job,
    pub scenario_path: PathBuf,
    /// Directory that relative table paths resolve against.
    pub scenario_dir: PathBuf,
    pub scenario_sha256: String,
    /// Scenario after overrides, as TOML.
    pub resolved_scenario: String,
    pub overrides: Overrides,
    pub seed: u64,
    pub n_paths: usize,
    pub outputs: Vec<OutputFile>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of the resolved scenario: its TOML plus every tabulated coefficient,
/// so table-backed inputs are covered too.
pub fn scenario_hash(s: &Scenario) -> String {
    let mut h = Sha256::new();
    h.update(s.render().as_bytes());
    let mut feed = |xs: &[f64]| xs.iter().for_each(|x| h.update(x.to_le_bytes()));
    feed(s.coeffs.phi.values());
    feed(&s.coeffs.xi);
    s.coeffs.beta.iter().for_each(|row| feed(row));
    feed(&s.terminal.f0);
    feed(&s.terminal.f1);
    feed(&s.terminal.f2);
    feed(&s.terminal.g);
    feed(&s.levy.marks);
    feed(&s.levy.intensities);
    format!("{:x}", h.finalize())
}
