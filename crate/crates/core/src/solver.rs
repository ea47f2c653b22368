//! The explicit solution triplet for deterministic `ξ`, `β` and an affine
//! terminal functional `F(t) = f0(t) + f1(t) B(T) + f2(t) J(T)`.
//!
//! Under the changed measure `B_Q(t) = B(t) - ∫_0^t ξ` and
//! `J(t) - ∫_0^t Σ_k g(ζ_k) β(r, ζ_k) ν_k dr` are martingales, so
//!
//! ```text
//! E_Q[B(T) | F_t] = B(t) + ξ̄(t),   ξ̄(t) = ∫_t^T ξ(r) dr
//! E_Q[J(T) | F_t] = J(t) + β̄(t),   β̄(t) = ∫_t^T Σ_k g(ζ_k) β(r, ζ_k) ν_k dr
//! ```
//!
//! and `Y(t) = a(t) + b(t) B(t) + c(t) J(t)` with `b = f1 + Ψ⋆f1`,
//! `c = f2 + Ψ⋆f2`, `a = f0 + Ψ⋆f0 + b ξ̄ + c β̄`. The Malliavin derivatives
//! of `F` and `Y` are the deterministic coefficients, which gives
//! `Z(t, s) = f1(t) + ∫_s^T Φ(t, r) b(r) dr` and
//! `K(t, s, ζ) = g(ζ) (f2(t) + ∫_s^T Φ(t, r) c(r) dr)`.

use thiserror::Error;

use crate::grid::TimeGrid;
use crate::kernel::{tail_integrals, trapezoid, trapezoid_weight, KernelGrid};
use crate::resolvent::{apply_resolvent, ResolventTable};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("resolvent grid does not match the scenario grid")]
    GridMismatch,
    #[error("Z and K are defined only for t <= s (got t index {t}, s index {s})")]
    NotUpperTriangle { t: usize, s: usize },
    #[error("mark index {0} out of range")]
    NoSuchMark(usize),
}

/// Jump-density factor `H̃_s` of the changed-measure Clark-Ocone formula.
/// Identically one when `β` is deterministic, since `D_{s,x} β = 0`.
const H_TILDE: f64 = 1.0;

/// `ξ̄(t_i)` and `β̄(t_i)` on every node.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftTails {
    pub xi_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
}

impl DriftTails {
    pub fn new(s: &Scenario) -> Self {
        let jump_drift: Vec<f64> = s
            .coeffs
            .beta
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&s.terminal.g)
                    .zip(&s.levy.intensities)
                    .map(|((b, g), nu)| g * b * nu)
                    .sum()
            })
            .collect();
        Self {
            xi_bar: tail_integrals(&s.grid, &s.coeffs.xi),
            beta_bar: tail_integrals(&s.grid, &jump_drift),
        }
    }
}

/// `F̃(r, t) = E_Q[F(r) | F_t]` given `B(t)` and `J(t)`.
pub fn conditional_f(
    s: &Scenario,
    tails: &DriftTails,
    r: usize,
    t: usize,
    b_t: f64,
    j_t: f64,
) -> f64 {
    let f = &s.terminal;
    f.f0[r] + f.f1[r] * (b_t + tails.xi_bar[t]) + f.f2[r] * (j_t + tails.beta_bar[t])
}

/// `Y(t) = a(t) + b(t) B(t) + c(t) J(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSolution {
    pub grid: TimeGrid,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub tails: DriftTails,
}

impl AffineSolution {
    /// `Y(t_i)` from the state `(B(t_i), J(t_i))` alone.
    #[inline]
    pub fn y(&self, i: usize, b_t: f64, j_t: f64) -> f64 {
        self.a[i] + self.b[i] * b_t + self.c[i] * j_t
    }

    pub fn y_path(&self, brownian: &[f64], jump: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| self.y(i, brownian[i], jump[i]))
            .collect()
    }
}

/// `Y(t) = E_Q[F(t) + ∫_t^T Ψ(t, r) F(r) dr | F_t]` in affine form.
pub fn solve_y(s: &Scenario, table: &ResolventTable) -> Result<AffineSolution, SolverError> {
    if *table.psi.grid() != s.grid {
        return Err(SolverError::GridMismatch);
    }
    let resolve = |f: &[f64]| apply_resolvent(&table.psi, f).expect("lengths match the grid");
    let f = &s.terminal;
    let tails = DriftTails::new(s);
    let base = resolve(&f.f0);
    let b = resolve(&f.f1);
    let c = resolve(&f.f2);
    let a = (0..s.grid.len())
        .map(|i| base[i] + b[i] * tails.xi_bar[i] + c[i] * tails.beta_bar[i])
        .collect();
    Ok(AffineSolution {
        grid: s.grid,
        a,
        b,
        c,
        tails,
    })
}

/// `U(t_i) = F(t_i) + ∫_{t_i}^T Φ(t_i, r) Y(r) dr - Y(t_i)` as an affine
/// functional of the path values at the nodes `t_k`, `k >= i`:
///
/// `U(t_i) = constant[i] + Σ_k brownian(i, k) B(t_k) + Σ_k jump(i, k) J(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UFunctional {
    pub constant: Vec<f64>,
    pub brownian: KernelGrid,
    pub jump: KernelGrid,
}

/// Coefficients of `E_Q[U(t_i) | F_{t_i}] = constant + on_b · B(t_i) + on_j · J(t_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalU {
    pub constant: f64,
    pub on_b: f64,
    pub on_j: f64,
}

impl ConditionalU {
    pub fn max_abs(&self) -> f64 {
        self.constant
            .abs()
            .max(self.on_b.abs())
            .max(self.on_j.abs())
    }
}

impl UFunctional {
    pub fn eval(&self, i: usize, brownian: &[f64], jump: &[f64]) -> f64 {
        let n = self.brownian.grid().n_steps();
        let (rb, rj) = (self.brownian.row(i), self.jump.row(i));
        let mut acc = self.constant[i];
        for k in i..=n {
            acc += rb[k - i] * brownian[k] + rj[k - i] * jump[k];
        }
        acc
    }

    pub fn eval_path(&self, brownian: &[f64], jump: &[f64]) -> Vec<f64> {
        (0..self.constant.len())
            .map(|i| self.eval(i, brownian, jump))
            .collect()
    }

    /// Conditional expectation on `F_{t_i}` for every node, using
    /// `E_Q[B(t_k) | F_{t_i}] = B(t_i) + ξ̄(t_i) - ξ̄(t_k)` and likewise for `J`.
    pub fn conditional(&self, tails: &DriftTails) -> Vec<ConditionalU> {
        let n = self.brownian.grid().n_steps();
        (0..=n)
            .map(|i| {
                let (rb, rj) = (self.brownian.row(i), self.jump.row(i));
                let mut out = ConditionalU {
                    constant: self.constant[i],
                    on_b: 0.0,
                    on_j: 0.0,
                };
                for k in i..=n {
                    let (mb, mj) = (rb[k - i], rj[k - i]);
                    out.on_b += mb;
                    out.on_j += mj;
                    out.constant += mb * (tails.xi_bar[i] - tails.xi_bar[k])
                        + mj * (tails.beta_bar[i] - tails.beta_bar[k]);
                }
                out
            })
            .collect()
    }

    /// Largest weight on interior nodes `t_i < t_k < T`. Zero exactly when `U`
    /// depends on the path only through `B(T), J(T), B(t), J(t)`.
    pub fn max_interior_weight(&self) -> f64 {
        let n = self.brownian.grid().n_steps();
        let mut worst = 0.0_f64;
        for i in 0..=n {
            for k in i + 1..n {
                worst = worst
                    .max(self.brownian.get(i, k).abs())
                    .max(self.jump.get(i, k).abs());
            }
        }
        worst
    }
}

/// Build `U` from `Y`.
pub fn compute_u(s: &Scenario, y: &AffineSolution) -> UFunctional {
    let grid = s.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let phi = &s.coeffs.phi;
    let f = &s.terminal;

    let constant = (0..=n)
        .map(|i| {
            let row = phi.row(i);
            f.f0[i] + trapezoid(dt, i, n, |k| row[k - i] * y.a[k]) - y.a[i]
        })
        .collect();
    let coefficient = |terminal: &[f64], coeff: &[f64]| {
        KernelGrid::from_fn(grid, |i, k| {
            let mut v = trapezoid_weight(dt, i, n, k) * phi.get(i, k) * coeff[k];
            if k == n {
                v += terminal[i];
            }
            if k == i {
                v -= coeff[i];
            }
            v
        })
    };
    UFunctional {
        constant,
        brownian: coefficient(&f.f1, &y.b),
        jump: coefficient(&f.f2, &y.c),
    }
}

/// Row-wise `f(t_i) + ∫_{t_j}^T Φ(t_i, r) h(r) dr` for `i <= j`.
fn tail_kernel(s: &Scenario, f: &[f64], h: &[f64]) -> KernelGrid {
    let grid = s.grid;
    let n = grid.n_steps();
    let half_dt = 0.5 * grid.dt();
    let phi = &s.coeffs.phi;
    let mut out = KernelGrid::zeros(grid);
    out.fill_rows(|i, row| {
        let p = phi.row(i);
        let mut acc = 0.0;
        row[n - i] = f[i];
        for j in (i..n).rev() {
            acc += half_dt * (p[j - i] * h[j] + p[j + 1 - i] * h[j + 1]);
            row[j - i] = f[i] + acc;
        }
    });
    out
}

/// `Z(t, s) = E_Q[D_s F(t) + ∫_t^T D_s(Φ(t, r) Y(r)) dr | F_s]` with
/// `D_s F(t) = f1(t)` and `D_s Y(r) = b(r) 1{s <= r}`.
pub fn solve_z(s: &Scenario, y: &AffineSolution) -> KernelGrid {
    // D_sξ = 0: the correction -U(t) ∫_s^T D_sξ dB_Q vanishes
    tail_kernel(s, &s.terminal.f1, &y.b)
}

/// `K(t, s, ζ_k) = E_Q[U(t)(H̃_s - 1) + H̃_s D_{s,ζ} U(t) | F_s]` with
/// `D_{s,ζ} U(t) = g(ζ)(f2(t) + ∫_s^T Φ(t, r) c(r) dr)`. One grid per mark.
pub fn solve_k(s: &Scenario, y: &AffineSolution) -> Vec<KernelGrid> {
    let base = tail_kernel(s, &s.terminal.f2, &y.c);
    s.terminal
        .g
        .iter()
        .map(|&g| {
            let mut k = base.clone();
            k.scale(H_TILDE * g);
            k
        })
        .collect()
}

/// `(Y, Z, K)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTriplet {
    pub y: AffineSolution,
    pub z: KernelGrid,
    pub k: Vec<KernelGrid>,
}

impl SolutionTriplet {
    pub fn z_at(&self, t: usize, s: usize) -> Result<f64, SolverError> {
        if t > s {
            return Err(SolverError::NotUpperTriangle { t, s });
        }
        Ok(self.z.get(t, s))
    }

    pub fn k_at(&self, t: usize, s: usize, mark: usize) -> Result<f64, SolverError> {
        if t > s {
            return Err(SolverError::NotUpperTriangle { t, s });
        }
        let k = self.k.get(mark).ok_or(SolverError::NoSuchMark(mark))?;
        Ok(k.get(t, s))
    }
}

pub fn solve(s: &Scenario, table: &ResolventTable) -> Result<SolutionTriplet, SolverError> {
    let y = solve_y(s, table)?;
    let z = solve_z(s, &y);
    let k = solve_k(s, &y);
    Ok(SolutionTriplet { y, z, k })
}

/// Forward differences in `t`: `(Z(t_{i+1}, s_j) - Z(t_i, s_j)) / Δt` for
/// `i + 1 <= j`, stored at `(i, j)`. Row `n` and the diagonal are zero.
pub fn time_derivative(z: &KernelGrid) -> KernelGrid {
    let grid = *z.grid();
    let dt = grid.dt();
    KernelGrid::from_fn(grid, |i, j| {
        if i < j {
            (z.get(i + 1, j) - z.get(i, j)) / dt
        } else {
            0.0
        }
    })
}

/// `Σ_{i < j} (∂Z/∂t)² Δs Δt` over the forward-difference grid.
pub fn squared_gradient_sum(dz: &KernelGrid) -> f64 {
    let dt = dz.grid().dt();
    let n = dz.grid().n_steps();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..=n {
            let v = dz.get(i, j);
            acc += v * v;
        }
    }
    acc * dt * dt
}

/// Max gap between forward differences on a grid and on its two-fold
/// refinement, compared at the coarse nodes.
pub fn refinement_gap(coarse: &KernelGrid, fine: &KernelGrid) -> f64 {
    let n = coarse.grid().n_steps();
    assert_eq!(
        fine.grid().n_steps(),
        2 * n,
        "fine grid must halve the step"
    );
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i + 1..=n {
            worst = worst.max((coarse.get(i, j) - fine.get(2 * i, 2 * j)).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolvent::{neumann_resolvent, resolvent_residual, volterra_solve};

    fn scenario(body: &str) -> Scenario {
        Scenario::parse(body, ".").unwrap()
    }

    fn build(s: &Scenario) -> (ResolventTable, SolutionTriplet) {
        let table = neumann_resolvent(&s.coeffs.phi, s.coeffs.bound_c, s.tol.neumann_tol).unwrap();
        let sol = solve(s, &table).unwrap();
        (table, sol)
    }

    const BASE: &str = "[grid]\nT = 1.0\nn_steps = 100\n";

    #[test]
    fn deterministic_terminal_matches_volterra_oracle() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"1\"\nbound_C = 1.0\n[terminal]\nf0 = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        let oracle = volterra_solve(&s.coeffs.phi, &s.terminal.f0).unwrap();
        assert!((sol.y.a[0] - std::f64::consts::E).abs() < 1e-4);
        let gap = sol
            .y
            .a
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-4, "{gap}");
        assert!(sol.y.b.iter().all(|&v| v == 0.0));
        assert_eq!(sol.z.max_abs(), 0.0);
    }

    #[test]
    fn zero_kernel_brownian_terminal() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"0\"\nbound_C = 0.0\n[terminal]\nf0 = \"0\"\nf1 = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        assert!(sol.y.a.iter().all(|&v| v == 0.0));
        assert!(sol.y.b.iter().all(|&v| v == 1.0));
        assert!(sol.y.c.iter().all(|&v| v == 0.0));
        assert!(sol.z.iter().all(|(_, _, v)| v == 1.0));
    }

    #[test]
    fn unit_kernel_brownian_terminal() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"1\"\nbound_C = 1.0\n[terminal]\nf0 = \"0\"\nf1 = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        let g = s.grid;
        for i in 0..=100 {
            assert!((sol.y.b[i] - (1.0 - g.node(i)).exp()).abs() < 1e-4);
            for j in i..=100 {
                assert!((sol.z.get(i, j) - (1.0 - g.node(j)).exp()).abs() < 1e-4);
            }
        }
        assert!(sol.y.a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_jump_terminal() {
        let s = scenario(&format!(
            "{BASE}[levy]\nmarks = [1.0]\nintensities = [2.0]\n[coefficients]\nphi = \"1\"\nbound_C = 1.0\n\
             [terminal]\nf0 = \"0\"\nf2 = \"1\"\ng = \"2\"\n"
        ));
        let (_, sol) = build(&s);
        let g = s.grid;
        for i in 0..=100 {
            for j in i..=100 {
                let expected = 2.0 * (1.0 - g.node(j)).exp();
                assert!((sol.k_at(i, j, 0).unwrap() - expected).abs() < 1e-3);
            }
        }
        assert_eq!(sol.z.max_abs(), 0.0);
    }

    #[test]
    fn zero_kernel_pure_jump_terminal() {
        let s = scenario(&format!(
            "{BASE}[levy]\nmarks = [0.5]\nintensities = [1.0]\n[coefficients]\nphi = \"0\"\nbound_C = 0.0\n\
             [terminal]\nf0 = \"0\"\nf2 = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        assert!(sol.k[0].iter().all(|(_, _, v)| v == 1.0));
        assert!(sol.y.c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conditional_f_examples() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"0\"\nxi = \"0.5\"\nbound_C = 0.0\n[terminal]\nf0 = \"0\"\nf1 = \"1\"\n"
        ));
        let tails = DriftTails::new(&s);
        // t = 0.5 is node 50
        let v = conditional_f(&s, &tails, 10, 50, 0.3, 0.0);
        assert!((v - (0.3 + 0.25)).abs() < 1e-14);

        let det = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"0\"\nxi = \"0.5\"\nbound_C = 0.0\n[terminal]\nf0 = \"t*t\"\n"
        ));
        let tails = DriftTails::new(&det);
        assert_eq!(
            conditional_f(&det, &tails, 20, 5, 7.0, -3.0),
            det.terminal.f0[20]
        );
    }

    #[test]
    fn terminal_condition_holds_exactly() {
        let s = scenario(&format!(
            "{BASE}[levy]\nmarks = [1.0, 2.0]\nintensities = [1.0, 0.5]\n[coefficients]\n\
             phi = \"1 + t*s\"\nxi = \"sin(s)\"\nbeta = \"0.3*z\"\nbound_C = 2.0\n\
             [terminal]\nf0 = \"t\"\nf1 = \"exp(-t)\"\nf2 = \"1 - t\"\ng = \"z\"\n"
        ));
        let (_, sol) = build(&s);
        let n = 100;
        assert_eq!(sol.y.a[n], s.terminal.f0[n]);
        assert_eq!(sol.y.b[n], s.terminal.f1[n]);
        assert_eq!(sol.y.c[n], s.terminal.f2[n]);
        assert_eq!(sol.y.tails.xi_bar[n], 0.0);
        assert_eq!(sol.y.tails.beta_bar[n], 0.0);
    }

    #[test]
    fn zero_kernel_u_is_centred_noise() {
        let s = scenario(&format!(
            "{BASE}[levy]\nmarks = [1.0]\nintensities = [1.0]\n[coefficients]\nphi = \"0\"\nxi = \"0.4\"\n\
             beta = \"0.5\"\nbound_C = 0.0\n[terminal]\nf0 = \"t\"\nf1 = \"2\"\nf2 = \"3\"\ng = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        let u = compute_u(&s, &sol.y);
        let n = 100;
        let tails = &sol.y.tails;
        for i in 0..=n {
            // U(t) = f1 (B(T) - B(t) - ξ̄(t)) + f2 (J(T) - J(t) - β̄(t))
            let bb: Vec<f64> = (0..=n).map(|k| if k == n { 1.0 } else { 0.0 }).collect();
            let zero = vec![0.0; n + 1];
            let at_bt = u.eval(i, &bb, &zero);
            let base = u.eval(i, &zero, &zero);
            let expected_base = -2.0 * tails.xi_bar[i] - 3.0 * tails.beta_bar[i];
            assert!((base - expected_base).abs() < 1e-13);
            if i < n {
                assert!((at_bt - base - 2.0).abs() < 1e-13);
            }
        }
        assert_eq!(u.max_interior_weight(), 0.0);
    }

    #[test]
    fn conditional_u_vanishes_coefficientwise() {
        let s = scenario(&format!(
            "{BASE}[levy]\nmarks = [1.0]\nintensities = [1.5]\n[coefficients]\nphi = \"1 + t*s\"\nxi = \"0.5\"\n\
             beta = \"0.5*s\"\nbound_C = 2.0\n[terminal]\nf0 = \"cos(t)\"\nf1 = \"1\"\nf2 = \"t\"\ng = \"2\"\n"
        ));
        let (table, sol) = build(&s);
        let u = compute_u(&s, &sol.y);
        let residual = resolvent_residual(&s.coeffs.phi, &table.psi).unwrap();
        let dt = s.grid.dt();
        let worst = u
            .conditional(&sol.y.tails)
            .iter()
            .map(|c| c.max_abs())
            .fold(0.0, f64::max);
        assert!(
            worst <= 10.0 * dt * dt,
            "E_Q[U|F_t] defect {worst}, residual {residual}"
        );
    }

    #[test]
    fn z_rejects_lower_triangle() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"0\"\nbound_C = 0.0\n[terminal]\nf0 = \"0\"\nf1 = \"1\"\n"
        ));
        let (_, sol) = build(&s);
        assert_eq!(
            sol.z_at(5, 3),
            Err(SolverError::NotUpperTriangle { t: 5, s: 3 })
        );
        assert!(sol.k_at(5, 3, 0).is_err());
        assert_eq!(sol.k_at(1, 3, 0), Err(SolverError::NoSuchMark(0)));
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let s = scenario(&format!(
            "{BASE}[coefficients]\nphi = \"1\"\nbound_C = 1.0\n[terminal]\nf0 = \"1\"\n"
        ));
        let other = TimeGrid::new(1.0, 10).unwrap();
        let phi = KernelGrid::from_fn(other, |_, _| 1.0);
        let table = neumann_resolvent(&phi, 1.0, 1e-8).unwrap();
        assert_eq!(solve_y(&s, &table), Err(SolverError::GridMismatch));
    }
}
