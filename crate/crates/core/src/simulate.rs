//! Jump-diffusion path ensembles, measure-change weights and the increments
//! of the driving noises under the changed measure.
//!
//! Path `p` draws from its own ChaCha8 stream `(master_seed, p)`, so the
//! ensemble does not depend on how paths are scheduled across threads.
//! Coefficients are frozen at the left node of each step and all jumps in a
//! step are attributed to that node.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("beta = {value} at node {node}, mark {mark} is below -1 + eps = {floor}")]
    BetaBound {
        node: usize,
        mark: usize,
        value: f64,
        floor: f64,
    },
    #[error("path ensemble was simulated on a different grid or jump model")]
    Mismatch,
}

/// `count` jumps of mark `mark` during step `step`, i.e. on `[t_step, t_step+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JumpRecord {
    pub step: u32,
    pub mark: u32,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
    /// Row-major `[path][step]`.
    brownian: Vec<f64>,
    jumps: Vec<Vec<JumpRecord>>,
    /// `g(ζ_k)` and `ν_k`, kept so `J` can be rebuilt from the records.
    jump_weights: Vec<f64>,
    intensities: Vec<f64>,
}

/// Stream for one path, derived from the master seed and the path index.
pub fn path_rng(master_seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path);
    rng
}

/// Simulate `n_paths` paths with `mc.seed` from the scenario.
pub fn simulate_paths(s: &Scenario) -> PathEnsemble {
    simulate_paths_with(s, s.mc.n_paths, s.mc.seed)
}

pub fn simulate_paths_with(s: &Scenario, n_paths: usize, master_seed: u64) -> PathEnsemble {
    let grid = s.grid;
    let n = grid.n_steps();
    let sqrt_dt = grid.dt().sqrt();
    let poissons: Vec<Poisson<f64>> = s
        .levy
        .intensities
        .iter()
        .map(|&nu| Poisson::new(nu * grid.dt()).expect("validated intensity"))
        .collect();

    let per_path: Vec<(Vec<f64>, Vec<JumpRecord>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(master_seed, p as u64);
            let mut db = Vec::with_capacity(n);
            let mut jumps = Vec::new();
            for step in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                db.push(z * sqrt_dt);
                for (mark, dist) in poissons.iter().enumerate() {
                    let count = dist.sample(&mut rng) as u32;
                    if count > 0 {
                        jumps.push(JumpRecord {
                            step: step as u32,
                            mark: mark as u32,
                            count,
                        });
                    }
                }
            }
            (db, jumps)
        })
        .collect();

    let mut brownian = Vec::with_capacity(n_paths * n);
    let mut jumps = Vec::with_capacity(n_paths);
    for (db, j) in per_path {
        brownian.extend_from_slice(&db);
        jumps.push(j);
    }
    PathEnsemble {
        grid,
        n_paths,
        master_seed,
        brownian,
        jumps,
        jump_weights: s.terminal.g.clone(),
        intensities: s.levy.intensities.clone(),
    }
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_marks(&self) -> usize {
        self.intensities.len()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// `ΔB(i) = B(t_{i+1}) - B(t_i)` for path `p`.
    pub fn brownian_increments(&self, p: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.brownian[p * n..(p + 1) * n]
    }

    pub fn jumps(&self, p: usize) -> &[JumpRecord] {
        &self.jumps[p]
    }

    /// `B(t_i)` on every node.
    pub fn brownian_path(&self, p: usize) -> Vec<f64> {
        cumulative(self.brownian_increments(p))
    }

    /// Dense jump counts, `counts[step * n_marks + mark]`.
    pub fn jump_counts(&self, p: usize) -> Vec<u32> {
        let m = self.n_marks();
        let mut out = vec![0; self.grid.n_steps() * m];
        for r in &self.jumps[p] {
            out[r.step as usize * m + r.mark as usize] += r.count;
        }
        out
    }

    /// Increments of `J(t) = ∫∫ g(ζ) Ñ(ds, dζ)` per step.
    pub fn jump_increments(&self, p: usize) -> Vec<f64> {
        let dt = self.grid.dt();
        let drift: f64 = self
            .jump_weights
            .iter()
            .zip(&self.intensities)
            .map(|(g, nu)| g * nu * dt)
            .sum();
        let mut out = vec![-drift; self.grid.n_steps()];
        for r in &self.jumps[p] {
            out[r.step as usize] += self.jump_weights[r.mark as usize] * r.count as f64;
        }
        out
    }

    /// `J(t_i)` on every node.
    pub fn jump_path(&self, p: usize) -> Vec<f64> {
        cumulative(&self.jump_increments(p))
    }

    /// Total number of jumps on path `p`.
    pub fn total_jumps(&self, p: usize) -> u64 {
        self.jumps[p].iter().map(|r| r.count as u64).sum()
    }

    fn matches(&self, s: &Scenario) -> bool {
        self.grid == s.grid
            && self.intensities == s.levy.intensities
            && self.jump_weights == s.terminal.g
    }
}

fn cumulative(increments: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for d in increments {
        acc += d;
        out.push(acc);
    }
    out
}

/// `ln M(t_i)` per path, with `M` the density process of the changed measure.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovWeights {
    n_nodes: usize,
    log_density: Vec<f64>,
}

impl GirsanovWeights {
    pub fn n_paths(&self) -> usize {
        self.log_density.len() / self.n_nodes
    }

    pub fn log_path(&self, p: usize) -> &[f64] {
        &self.log_density[p * self.n_nodes..(p + 1) * self.n_nodes]
    }

    /// `M(t_i)` on path `p`.
    pub fn at(&self, p: usize, i: usize) -> f64 {
        self.log_path(p)[i].exp()
    }

    /// `M(T)` on path `p`.
    pub fn terminal(&self, p: usize) -> f64 {
        self.at(p, self.n_nodes - 1)
    }

    pub fn terminal_all(&self) -> Vec<f64> {
        (0..self.n_paths()).map(|p| self.terminal(p)).collect()
    }
}

/// Accumulate `ln M` along each path:
/// `Σ ξ ΔB - ½ Σ ξ² Δt + Σ_jumps ln(1 + β) - Σ_k β ν_k Δt`.
pub fn girsanov_weights(
    s: &Scenario,
    paths: &PathEnsemble,
) -> Result<GirsanovWeights, SimulateError> {
    if !paths.matches(s) {
        return Err(SimulateError::Mismatch);
    }
    let grid = s.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let floor = -1.0 + s.coeffs.eps;
    let xi = &s.coeffs.xi;
    let beta = &s.coeffs.beta;
    let nu = &s.levy.intensities;

    // left-node β must be admissible wherever it is evaluated
    for (i, row) in beta.iter().enumerate().take(n) {
        for (k, &b) in row.iter().enumerate() {
            if b.is_nan() || b < floor {
                return Err(SimulateError::BetaBound {
                    node: i,
                    mark: k,
                    value: b,
                    floor,
                });
            }
        }
    }
    let log_jump: Vec<Vec<f64>> = beta
        .iter()
        .map(|r| r.iter().map(|b| b.ln_1p()).collect())
        .collect();
    let drift: Vec<f64> = (0..n)
        .map(|i| {
            let jump_comp: f64 = beta[i].iter().zip(nu).map(|(b, v)| b * v * dt).sum();
            -0.5 * xi[i] * xi[i] * dt - jump_comp
        })
        .collect();

    let log_density: Vec<f64> = (0..paths.n_paths())
        .into_par_iter()
        .flat_map_iter(|p| {
            let db = paths.brownian_increments(p);
            let mut step_log: Vec<f64> = (0..n).map(|i| xi[i] * db[i] + drift[i]).collect();
            for r in paths.jumps(p) {
                step_log[r.step as usize] +=
                    r.count as f64 * log_jump[r.step as usize][r.mark as usize];
            }
            cumulative(&step_log)
        })
        .collect();
    Ok(GirsanovWeights {
        n_nodes: n + 1,
        log_density,
    })
}

/// `ΔB_Q(i) = ΔB(i) - ξ(t_i) Δt` for path `p`.
pub fn brownian_q_increments(s: &Scenario, paths: &PathEnsemble, p: usize) -> Vec<f64> {
    let dt = s.grid.dt();
    paths
        .brownian_increments(p)
        .iter()
        .zip(&s.coeffs.xi)
        .map(|(db, xi)| db - xi * dt)
        .collect()
}

/// Jump counts compensated by the changed-measure intensity,
/// `N(i, k) - (1 + β(t_i, ζ_k)) ν_k Δt`, laid out `[step * n_marks + mark]`.
pub fn q_compensated_counts(s: &Scenario, paths: &PathEnsemble, p: usize) -> Vec<f64> {
    let dt = s.grid.dt();
    let m = s.n_marks();
    let counts = paths.jump_counts(p);
    let mut out = Vec::with_capacity(counts.len());
    for i in 0..s.grid.n_steps() {
        for k in 0..m {
            let q_rate = (1.0 + s.coeffs.beta[i][k]) * s.levy.intensities[k];
            out.push(counts[i * m + k] as f64 - q_rate * dt);
        }
    }
    out
}

/// Increments of `Ñ_γ(t) = ∫∫ γ(s, ζ) Ñ_Q(ds, dζ)`:
/// `Σ_jumps γ(t_i, ζ_k) - Σ_k γ(t_i, ζ_k)(1 + β(t_i, ζ_k)) ν_k Δt`.
pub fn jump_martingale_increments(
    s: &Scenario,
    paths: &PathEnsemble,
    p: usize,
    gamma: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let m = s.n_marks();
    let comp = q_compensated_counts(s, paths, p);
    (0..s.grid.n_steps())
        .map(|i| (0..m).map(|k| gamma(i, k) * comp[i * m + k]).sum())
        .collect()
}

/// Changed-measure increments for every path.
#[derive(Debug, Clone)]
pub struct QIncrements {
    /// `[path][step]`
    pub brownian: Vec<Vec<f64>>,
    /// `[path][step * n_marks + mark]`
    pub jumps: Vec<Vec<f64>>,
}

pub fn q_increments(s: &Scenario, paths: &PathEnsemble) -> QIncrements {
    let (brownian, jumps) = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            (
                brownian_q_increments(s, paths, p),
                q_compensated_counts(s, paths, p),
            )
        })
        .unzip();
    QIncrements { brownian, jumps }
}
