//! Problem instances: parsing, tabulation on the time grid, and validation.
//!
//! A scenario file is TOML with the sections below. Coefficients are either
//! expression strings (see [`crate::expr`]) or `{ table = "file.csv" }`
//! references resolved against the scenario's directory.
//!
//! ```toml
//! [grid]
//! T = 1.0
//! n_steps = 100
//!
//! [levy]                 # optional; empty means no jumps
//! marks = [1.0]
//! intensities = [2.0]
//!
//! [coefficients]
//! phi = "1"              # Φ(t, s), variables t, s
//! xi = "0.5"             # ξ(s), variable s           (default "0")
//! beta = "0"             # β(s, z), variables s, z    (default "0")
//! bound_C = 1.0          # sup |Φ|
//! eps = 0.01             # β ≥ -1 + eps               (default 0.01)
//!
//! [terminal]             # F(t) = f0(t) + f1(t) B(T) + f2(t) J(T)
//! f0 = "0"
//! f1 = "1"               # (default "0")
//! f2 = "0"               # (default "0")
//! g = "z"                # jump weight g(z)           (default "1")
//!
//! [mc]                   # optional
//! n_paths = 10000
//! seed = 0
//!
//! [tol]                  # optional
//! neumann_tol = 1e-10
//! residual_tol = 0.1
//! ```
//!
//! Table files are CSV with a header row: `i,value` for functions of one
//! time variable, `i,j,value` for `phi` (every `i <= j`), `i,k,value` for
//! `beta` (node `i`, mark index `k`), and `k,value` for `g`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Env, Expr, ParseError, Var};
use crate::grid::TimeGrid;
use crate::kernel::KernelGrid;

/// One failed check, naming the field and (where applicable) the grid node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub location: Option<String>,
    pub value: Option<f64>,
    pub message: String,
}

impl Violation {
    fn new(field: &str, location: Option<String>, value: Option<f64>, message: String) -> Self {
        Self {
            field: field.to_string(),
            location,
            value,
            message,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.field)?;
        if let Some(loc) = &self.location {
            write!(f, " at {loc}")?;
        }
        if let Some(v) = self.value {
            write!(f, " (value {v})")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario schema violation: {0}")]
    Schema(String),
    #[error("{field}: {source}")]
    Expression {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{field}: table {path}: {message}")]
    Table {
        field: String,
        path: PathBuf,
        message: String,
    },
    #[error("scenario failed validation:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

const SHOWN_VIOLATIONS: usize = 10;

fn format_violations(v: &[Violation]) -> String {
    let mut lines: Vec<String> = v
        .iter()
        .take(SHOWN_VIOLATIONS)
        .map(|x| format!("  - {x}"))
        .collect();
    if v.len() > SHOWN_VIOLATIONS {
        lines.push(format!("  ... and {} more", v.len() - SHOWN_VIOLATIONS));
    }
    lines.join("\n")
}

/// Where a coefficient function comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Expr(String),
    Table { table: String },
}

impl From<&str> for Source {
    fn from(s: &str) -> Self {
        Source::Expr(s.to_string())
    }
}

fn zero() -> Source {
    Source::Expr("0".into())
}

fn one() -> Source {
    Source::Expr("1".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyConfig {
    #[serde(default)]
    pub marks: Vec<f64>,
    #[serde(default)]
    pub intensities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub phi: Source,
    #[serde(default = "zero")]
    pub xi: Source,
    #[serde(default = "zero")]
    pub beta: Source,
    #[serde(rename = "bound_C")]
    pub bound_c: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub f0: Source,
    #[serde(default = "zero")]
    pub f1: Source,
    #[serde(default = "zero")]
    pub f2: Source,
    #[serde(default = "one")]
    pub g: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    10_000
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolConfig {
    #[serde(default = "default_neumann_tol")]
    pub neumann_tol: f64,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
}

fn default_neumann_tol() -> f64 {
    1e-10
}

fn default_residual_tol() -> f64 {
    0.1
}

impl Default for TolConfig {
    fn default() -> Self {
        Self {
            neumann_tol: default_neumann_tol(),
            residual_tol: default_residual_tol(),
        }
    }
}

/// The raw scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub levy: LevyConfig,
    pub coefficients: CoefficientConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub tol: TolConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Schema(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }
}

/// Finite-activity jump model: marks `ζ_k` with intensities `ν_k`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevyModel {
    pub marks: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl LevyModel {
    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn total_rate(&self) -> f64 {
        self.intensities.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

/// Coefficients tabulated on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub phi: KernelGrid,
    pub xi: Vec<f64>,
    /// `beta[i][k]` is `β(t_i, ζ_k)`.
    pub beta: Vec<Vec<f64>>,
    pub bound_c: f64,
    pub eps: f64,
}

/// `F(t) = f0(t) + f1(t) B(T) + f2(t) J(T)` with `J(T) = ∫∫ g(ζ) Ñ(ds, dζ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalFunctional {
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    /// `g(ζ_k)` per mark.
    pub g: Vec<f64>,
}

impl TerminalFunctional {
    pub fn is_deterministic(&self) -> bool {
        self.f1.iter().all(|&v| v == 0.0) && self.f2.iter().all(|&v| v == 0.0)
    }
}

/// A tabulated problem instance. Immutable once built.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    base_dir: PathBuf,
    pub grid: TimeGrid,
    pub levy: LevyModel,
    pub coeffs: CoefficientSet,
    pub terminal: TerminalFunctional,
    pub mc: McConfig,
    pub tol: TolConfig,
}

impl Scenario {
    /// Parse a scenario document and validate it. Table paths are resolved
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_config(ScenarioConfig::from_toml(text)?, base_dir)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn from_config(
        config: ScenarioConfig,
        base_dir: impl AsRef<Path>,
    ) -> Result<Self, ScenarioError> {
        let s = Self::build_unchecked(config, base_dir)?;
        let violations = validate_bounds(&s);
        if violations.is_empty() {
            Ok(s)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }

    /// Tabulate without the bound checks of [`validate_bounds`]. Structural
    /// problems (empty grid, mismatched mark lists, bad expressions, unreadable
    /// tables) are still errors.
    pub fn build_unchecked(
        config: ScenarioConfig,
        base_dir: impl AsRef<Path>,
    ) -> Result<Self, ScenarioError> {
        let base_dir = base_dir.as_ref().to_path_buf();
        let grid = TimeGrid::new(config.grid.horizon, config.grid.n_steps).map_err(|e| {
            let field = if config.grid.n_steps == 0 {
                "grid.n_steps"
            } else {
                "grid.T"
            };
            ScenarioError::Invalid(vec![Violation::new(field, None, None, e.to_string())])
        })?;
        let levy_cfg = &config.levy;
        if levy_cfg.marks.len() != levy_cfg.intensities.len() {
            return Err(ScenarioError::Invalid(vec![Violation::new(
                "levy.intensities",
                None,
                None,
                format!(
                    "{} marks but {} intensities",
                    levy_cfg.marks.len(),
                    levy_cfg.intensities.len()
                ),
            )]));
        }
        let levy = LevyModel {
            marks: levy_cfg.marks.clone(),
            intensities: levy_cfg.intensities.clone(),
        };
        let tab = Tabulator {
            grid,
            marks: &levy.marks,
            base_dir: &base_dir,
        };
        let c = &config.coefficients;
        let coeffs = CoefficientSet {
            phi: tab.kernel("coefficients.phi", &c.phi)?,
            xi: tab.time_fn("coefficients.xi", &c.xi, Var::S)?,
            beta: tab.beta("coefficients.beta", &c.beta)?,
            bound_c: c.bound_c,
            eps: c.eps,
        };
        let t = &config.terminal;
        let terminal = TerminalFunctional {
            f0: tab.time_fn("terminal.f0", &t.f0, Var::T)?,
            f1: tab.time_fn("terminal.f1", &t.f1, Var::T)?,
            f2: tab.time_fn("terminal.f2", &t.f2, Var::T)?,
            g: tab.mark_fn("terminal.g", &t.g)?,
        };
        Ok(Self {
            mc: config.mc,
            tol: config.tol,
            config,
            base_dir,
            grid,
            levy,
            coeffs,
            terminal,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Serialize back to a scenario document. Parsing the result against the
    /// same base directory reproduces every tabulated value bit for bit.
    pub fn render(&self) -> String {
        self.config.to_toml()
    }

    pub fn n_marks(&self) -> usize {
        self.levy.n_marks()
    }
}

struct Tabulator<'a> {
    grid: TimeGrid,
    marks: &'a [f64],
    base_dir: &'a Path,
}

impl Tabulator<'_> {
    fn compile(&self, field: &str, src: &str, vars: &[Var]) -> Result<Expr, ScenarioError> {
        Expr::parse(src, vars).map_err(|source| ScenarioError::Expression {
            field: field.to_string(),
            source,
        })
    }

    fn kernel(&self, field: &str, src: &Source) -> Result<KernelGrid, ScenarioError> {
        let g = self.grid;
        match src {
            Source::Expr(e) => {
                let e = self.compile(field, e, &[Var::T, Var::S])?;
                Ok(KernelGrid::from_fn(g, |i, j| {
                    e.eval(Env {
                        t: g.node(i),
                        s: g.node(j),
                        z: 0.0,
                    })
                }))
            }
            Source::Table { table } => {
                let n = g.n_steps();
                let map = self.read_table(field, table, &["i", "j"])?;
                let mut k = KernelGrid::zeros(g);
                for i in 0..=n {
                    for j in i..=n {
                        let v = map.get(&vec![i, j]).ok_or_else(|| {
                            self.table_err(field, table, format!("missing entry ({i}, {j})"))
                        })?;
                        k.set(i, j, *v);
                    }
                }
                Ok(k)
            }
        }
    }

    fn time_fn(&self, field: &str, src: &Source, var: Var) -> Result<Vec<f64>, ScenarioError> {
        match src {
            Source::Expr(e) => {
                let e = self.compile(field, e, &[var])?;
                Ok(self.grid.tabulate(|x| e.eval(Env { t: x, s: x, z: 0.0 })))
            }
            Source::Table { table } => {
                let map = self.read_table(field, table, &["i"])?;
                (0..self.grid.len())
                    .map(|i| {
                        map.get(&vec![i]).copied().ok_or_else(|| {
                            self.table_err(field, table, format!("missing entry for node {i}"))
                        })
                    })
                    .collect()
            }
        }
    }

    fn beta(&self, field: &str, src: &Source) -> Result<Vec<Vec<f64>>, ScenarioError> {
        let g = self.grid;
        match src {
            Source::Expr(e) => {
                let e = self.compile(field, e, &[Var::S, Var::Z])?;
                Ok(g.nodes()
                    .map(|s| {
                        self.marks
                            .iter()
                            .map(|&z| e.eval(Env { t: s, s, z }))
                            .collect()
                    })
                    .collect())
            }
            Source::Table { table } => {
                let map = self.read_table(field, table, &["i", "k"])?;
                (0..g.len())
                    .map(|i| {
                        (0..self.marks.len())
                            .map(|k| {
                                map.get(&vec![i, k]).copied().ok_or_else(|| {
                                    self.table_err(
                                        field,
                                        table,
                                        format!("missing entry ({i}, {k})"),
                                    )
                                })
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn mark_fn(&self, field: &str, src: &Source) -> Result<Vec<f64>, ScenarioError> {
        match src {
            Source::Expr(e) => {
                let e = self.compile(field, e, &[Var::Z])?;
                Ok(self
                    .marks
                    .iter()
                    .map(|&z| e.eval(Env { t: 0.0, s: 0.0, z }))
                    .collect())
            }
            Source::Table { table } => {
                let map = self.read_table(field, table, &["k"])?;
                (0..self.marks.len())
                    .map(|k| {
                        map.get(&vec![k]).copied().ok_or_else(|| {
                            self.table_err(field, table, format!("missing entry for mark {k}"))
                        })
                    })
                    .collect()
            }
        }
    }

    fn table_err(&self, field: &str, table: &str, message: String) -> ScenarioError {
        ScenarioError::Table {
            field: field.to_string(),
            path: self.base_dir.join(table),
            message,
        }
    }

    /// Read a CSV table keyed by the integer index columns `keys`, followed by
    /// a `value` column.
    fn read_table(
        &self,
        field: &str,
        table: &str,
        keys: &[&str],
    ) -> Result<HashMap<Vec<usize>, f64>, ScenarioError> {
        let path = self.base_dir.join(table);
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&path)
            .map_err(|e| self.table_err(field, table, e.to_string()))?;
        let header = rdr
            .headers()
            .map_err(|e| self.table_err(field, table, e.to_string()))?
            .clone();
        let mut expected: Vec<&str> = keys.to_vec();
        expected.push("value");
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(self.table_err(
                field,
                table,
                format!("expected header `{}`", expected.join(",")),
            ));
        }
        let mut out = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| self.table_err(field, table, e.to_string()))?;
            let bad = |what: &str| {
                self.table_err(field, table, format!("row {}: invalid {what}", line + 2))
            };
            let mut key = Vec::with_capacity(keys.len());
            for (c, name) in keys.iter().enumerate() {
                key.push(rec[c].parse::<usize>().map_err(|_| bad(name))?);
            }
            let v = rec[keys.len()].parse::<f64>().map_err(|_| bad("value"))?;
            if out.insert(key, v).is_some() {
                return Err(self.table_err(
                    field,
                    table,
                    format!("row {}: duplicate key", line + 2),
                ));
            }
        }
        Ok(out)
    }
}

/// Check every tabulated value against the standing assumptions: `|Φ| ≤ C`,
/// `β ≥ -1 + ε`, boundedness of ξ, β and the terminal coefficients, plus the
/// jump model and numerical parameters. Returns an empty list when all hold.
pub fn validate_bounds(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let g = &s.grid;
    let c = &s.coeffs;

    if !(c.bound_c.is_finite() && c.bound_c >= 0.0) {
        out.push(Violation::new(
            "coefficients.bound_C",
            None,
            Some(c.bound_c),
            "must be finite and nonnegative".into(),
        ));
    }
    if !(c.eps.is_finite() && c.eps > 0.0) {
        out.push(Violation::new(
            "coefficients.eps",
            None,
            Some(c.eps),
            "must be finite and positive".into(),
        ));
    }

    for (i, j, v) in c.phi.iter() {
        if !v.is_finite() || v.abs() > c.bound_c {
            out.push(Violation::new(
                "coefficients.phi",
                Some(format!(
                    "node (i={i}, j={j}) (t={}, s={})",
                    g.node(i),
                    g.node(j)
                )),
                Some(v),
                format!("|phi| exceeds bound_C = {}", c.bound_c),
            ));
        }
    }
    for (i, &v) in c.xi.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::new(
                "coefficients.xi",
                Some(format!("node i={i} (s={})", g.node(i))),
                Some(v),
                "xi must be finite".into(),
            ));
        }
    }
    let floor = -1.0 + c.eps;
    for (i, row) in c.beta.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let loc = Some(format!(
                "node i={i} (s={}), mark k={k} (z={})",
                g.node(i),
                s.levy.marks[k]
            ));
            if !v.is_finite() {
                out.push(Violation::new(
                    "coefficients.beta",
                    loc,
                    Some(v),
                    "beta must be finite".into(),
                ));
            } else if v < floor {
                out.push(Violation::new(
                    "coefficients.beta",
                    loc,
                    Some(v),
                    format!("violates the beta bound beta >= -1 + eps = {floor}"),
                ));
            }
        }
    }
    for (name, f) in [
        ("terminal.f0", &s.terminal.f0),
        ("terminal.f1", &s.terminal.f1),
        ("terminal.f2", &s.terminal.f2),
    ] {
        for (i, &v) in f.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::new(
                    name,
                    Some(format!("node i={i} (t={})", g.node(i))),
                    Some(v),
                    "must be finite".into(),
                ));
            }
        }
    }
    for (k, &v) in s.terminal.g.iter().enumerate() {
        if !v.is_finite() {
            out.push(Violation::new(
                "terminal.g",
                Some(format!("mark k={k}")),
                Some(v),
                "must be finite".into(),
            ));
        }
    }

    for (k, &nu) in s.levy.intensities.iter().enumerate() {
        if !(nu.is_finite() && nu > 0.0) {
            out.push(Violation::new(
                "levy.intensities",
                Some(format!("mark k={k}")),
                Some(nu),
                "intensity must be finite and strictly positive".into(),
            ));
        }
    }
    for (k, &z) in s.levy.marks.iter().enumerate() {
        if !z.is_finite() {
            out.push(Violation::new(
                "levy.marks",
                Some(format!("mark k={k}")),
                Some(z),
                "mark must be finite".into(),
            ));
        }
        if s.levy.marks[..k].contains(&z) {
            out.push(Violation::new(
                "levy.marks",
                Some(format!("mark k={k}")),
                Some(z),
                "marks must be pairwise distinct".into(),
            ));
        }
    }

    if s.mc.n_paths == 0 {
        out.push(Violation::new(
            "mc.n_paths",
            None,
            Some(0.0),
            "need at least one path".into(),
        ));
    }
    for (name, v) in [
        ("tol.neumann_tol", s.tol.neumann_tol),
        ("tol.residual_tol", s.tol.residual_tol),
    ] {
        if !(v.is_finite() && v > 0.0) {
            out.push(Violation::new(
                name,
                None,
                Some(v),
                "must be finite and positive".into(),
            ));
        }
    }
    out
}
