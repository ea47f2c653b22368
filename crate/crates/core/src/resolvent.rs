//! Iterated kernels, the Neumann-series resolvent and deterministic backward
//! Volterra equations `y(t) = g(t) + ∫_t^T Φ(t, s) y(s) ds`.
//!
//! Every integral uses the composite trapezoid rule on grid nodes
//! ([`crate::kernel::trapezoid`]), summed left to right.

use thiserror::Error;

use crate::kernel::{trapezoid, KernelGrid};

#[derive(Debug, Error, PartialEq)]
pub enum ResolventError {
    #[error("iterated kernel order must be at least 1")]
    InvalidOrder,
    #[error("invalid kernel bound C = {bound}: sup |phi| on the grid is {observed}")]
    InvalidBound { bound: f64, observed: f64 },
    #[error("truncation tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("no truncation order up to {0} meets the tolerance")]
    TruncationTooLong(usize),
    #[error("kernels live on different time grids")]
    GridMismatch,
    #[error("function has {got} values, grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("backward substitution is singular at node {0} (1 - dt/2 phi(t,t) = 0)")]
    SingularStep(usize),
}

const MAX_TERMS: usize = 10_000;

/// `(A ⋆ B)(t_i, t_j) = ∫_{t_i}^{t_j} A(t_i, s) B(s, t_j) ds`.
pub fn compose(left: &KernelGrid, right: &KernelGrid) -> KernelGrid {
    assert_eq!(left.grid(), right.grid());
    let grid = *left.grid();
    let dt = grid.dt();
    let mut out = KernelGrid::zeros(grid);
    out.fill_rows(|i, row| {
        let a = left.row(i);
        for (off, v) in row.iter_mut().enumerate() {
            let j = i + off;
            *v = trapezoid(dt, i, j, |k| a[k - i] * right.get(k, j));
        }
    });
    out
}

/// Successive iterated kernels `Φ⁽¹⁾ = Φ, Φ⁽ⁿ⁾ = Φ⁽ⁿ⁻¹⁾ ⋆ Φ`, yielded with
/// their order.
pub struct IteratedKernels<'a> {
    phi: &'a KernelGrid,
    last: Option<KernelGrid>,
    order: usize,
}

impl<'a> IteratedKernels<'a> {
    pub fn new(phi: &'a KernelGrid) -> Self {
        Self {
            phi,
            last: None,
            order: 0,
        }
    }
}

impl Iterator for IteratedKernels<'_> {
    type Item = (usize, KernelGrid);

    fn next(&mut self) -> Option<Self::Item> {
        let next = match &self.last {
            None => self.phi.clone(),
            Some(prev) => compose(prev, self.phi),
        };
        self.order += 1;
        self.last = Some(next.clone());
        Some((self.order, next))
    }
}

/// `Φ⁽ⁿ⁾` on the grid.
pub fn iterated_kernel(phi: &KernelGrid, n: usize) -> Result<KernelGrid, ResolventError> {
    if n == 0 {
        return Err(ResolventError::InvalidOrder);
    }
    Ok(IteratedKernels::new(phi)
        .nth(n - 1)
        .expect("iterator is infinite")
        .1)
}

/// Pointwise bound on the `n`-th iterated kernel of a kernel bounded by `c`
/// on `[0, T]`: `|Φ⁽ⁿ⁾(t, r)| ≤ cⁿ (r - t)ⁿ⁻¹ / (n-1)! ≤ cⁿ Tⁿ⁻¹ / (n-1)!`.
pub fn iterated_kernel_bound(c: f64, horizon: f64, n: usize) -> f64 {
    assert!(n >= 1);
    let m = (n - 1) as f64;
    (n as f64 * c.ln() + m * horizon.ln() - ln_factorial(n - 1)).exp()
}

/// Bound on the discarded tail `Σ_{n>N} |Φ⁽ⁿ⁾|` after `n_terms = N` terms:
/// `c · (cT)^N / N! · e^{cT}`.
pub fn tail_bound(c: f64, horizon: f64, n_terms: usize) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let x = c * horizon;
    (c.ln() + n_terms as f64 * x.ln() - ln_factorial(n_terms) + x).exp()
}

/// Smallest `N ≥ 1` whose [`tail_bound`] does not exceed `tol`.
pub fn truncation_order(c: f64, horizon: f64, tol: f64) -> Result<usize, ResolventError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(ResolventError::InvalidTolerance(tol));
    }
    (1..=MAX_TERMS)
        .find(|&n| tail_bound(c, horizon, n) <= tol)
        .ok_or(ResolventError::TruncationTooLong(MAX_TERMS))
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Truncated resolvent `Ψ ≈ Σ_{n=1}^{N} Φ⁽ⁿ⁾`.
#[derive(Debug, Clone)]
pub struct ResolventTable {
    pub psi: KernelGrid,
    pub n_terms: usize,
    pub tail_bound: f64,
    pub bound_c: f64,
}

/// Sum the Neumann series up to the a-priori truncation order for bound `c`
/// and tolerance `tol`.
pub fn neumann_resolvent(
    phi: &KernelGrid,
    c: f64,
    tol: f64,
) -> Result<ResolventTable, ResolventError> {
    let observed = phi.max_abs();
    if !c.is_finite() || c < 0.0 || (c == 0.0 && observed > 0.0) || c < observed {
        return Err(ResolventError::InvalidBound { bound: c, observed });
    }
    let horizon = phi.grid().horizon();
    let n_terms = truncation_order(c, horizon, tol)?;
    let mut psi = KernelGrid::zeros(*phi.grid());
    for (_, term) in IteratedKernels::new(phi).take(n_terms) {
        psi.add_assign(&term);
    }
    Ok(ResolventTable {
        psi,
        n_terms,
        tail_bound: tail_bound(c, horizon, n_terms),
        bound_c: c,
    })
}

/// Max over the grid of `|Ψ(t,r) - Φ(t,r) - ∫_t^r Φ(t,s) Ψ(s,r) ds|`.
pub fn resolvent_residual(phi: &KernelGrid, psi: &KernelGrid) -> Result<f64, ResolventError> {
    if phi.grid() != psi.grid() {
        return Err(ResolventError::GridMismatch);
    }
    let product = compose(phi, psi);
    let n = phi.grid().n_steps();
    let mut worst = 0.0_f64;
    for i in 0..=n {
        for j in i..=n {
            let r = psi.get(i, j) - phi.get(i, j) - product.get(i, j);
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

fn check_len(kernel: &KernelGrid, g: &[f64]) -> Result<(), ResolventError> {
    let expected = kernel.grid().len();
    if g.len() != expected {
        return Err(ResolventError::LengthMismatch {
            expected,
            got: g.len(),
        });
    }
    Ok(())
}

/// `y(t_i) = g(t_i) + ∫_{t_i}^T Ψ(t_i, r) g(r) dr`.
pub fn apply_resolvent(psi: &KernelGrid, g: &[f64]) -> Result<Vec<f64>, ResolventError> {
    check_len(psi, g)?;
    let n = psi.grid().n_steps();
    let dt = psi.grid().dt();
    Ok((0..=n)
        .map(|i| {
            let row = psi.row(i);
            g[i] + trapezoid(dt, i, n, |k| row[k - i] * g[k])
        })
        .collect())
}

/// Solve `y(t_i) = g(t_i) + ∫_{t_i}^T Φ(t_i, s) y(s) ds` by backward
/// substitution on the trapezoid discretization, starting from `y(T) = g(T)`.
pub fn volterra_solve(phi: &KernelGrid, g: &[f64]) -> Result<Vec<f64>, ResolventError> {
    check_len(phi, g)?;
    let n = phi.grid().n_steps();
    let dt = phi.grid().dt();
    let mut y = vec![0.0; n + 1];
    y[n] = g[n];
    for i in (0..n).rev() {
        let row = phi.row(i);
        let mut known = 0.0;
        for k in i + 1..n {
            known += row[k - i] * y[k];
        }
        known += 0.5 * row[n - i] * y[n];
        let diag = 1.0 - 0.5 * dt * row[0];
        if diag == 0.0 {
            return Err(ResolventError::SingularStep(i));
        }
        y[i] = (g[i] + dt * known) / diag;
    }
    Ok(y)
}

/// Max over nodes of `|y(t_i) - g(t_i) - ∫_{t_i}^T Φ(t_i, s) y(s) ds|`.
pub fn volterra_residual(phi: &KernelGrid, g: &[f64], y: &[f64]) -> Result<f64, ResolventError> {
    check_len(phi, g)?;
    check_len(phi, y)?;
    let n = phi.grid().n_steps();
    let dt = phi.grid().dt();
    Ok((0..=n)
        .map(|i| {
            let row = phi.row(i);
            (y[i] - g[i] - trapezoid(dt, i, n, |k| row[k - i] * y[k])).abs()
        })
        .fold(0.0, f64::max))
}
