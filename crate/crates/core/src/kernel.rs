//! Upper-triangular kernel storage and the shared trapezoid rule.

use rayon::prelude::*;

use crate::grid::TimeGrid;

/// Composite trapezoid over the nodes `lo..=hi` of a uniform grid with step
/// `dt`, with `f(k)` the integrand at node `k`. A zero-width interval
/// (`lo == hi`) integrates to zero. Summation runs left to right.
#[inline]
pub fn trapezoid(dt: f64, lo: usize, hi: usize, f: impl Fn(usize) -> f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let mut acc = 0.5 * f(lo);
    for k in lo + 1..hi {
        acc += f(k);
    }
    acc += 0.5 * f(hi);
    dt * acc
}

/// Trapezoid weight of node `k` on `[lo, hi]`.
#[inline]
pub fn trapezoid_weight(dt: f64, lo: usize, hi: usize, k: usize) -> f64 {
    debug_assert!(lo <= k && k <= hi);
    if hi == lo {
        0.0
    } else if k == lo || k == hi {
        0.5 * dt
    } else {
        dt
    }
}

/// `g(t_i) = ∫_{t_i}^{T} f(r) dr` for every node, by the trapezoid rule.
/// Accumulated backwards so that each value is the composite rule on `[i, n]`.
pub fn tail_integrals(grid: &TimeGrid, f: &[f64]) -> Vec<f64> {
    let n = grid.n_steps();
    let dt = grid.dt();
    assert_eq!(f.len(), n + 1);
    let mut out = vec![0.0; n + 1];
    for i in (0..n).rev() {
        out[i] = out[i + 1] + 0.5 * dt * (f[i] + f[i + 1]);
    }
    out
}

/// A kernel tabulated on `(t_i, t_j)` for `i <= j`.
///
/// Rows are packed: row `i` holds columns `i..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    grid: TimeGrid,
    values: Vec<f64>,
}

#[inline]
fn row_offset(n: usize, i: usize) -> usize {
    // sum_{r<i} (n + 1 - r)
    i * (n + 1) - i * i.saturating_sub(1) / 2
}

impl KernelGrid {
    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.n_steps();
        Self {
            grid,
            values: vec![0.0; (n + 1) * (n + 2) / 2],
        }
    }

    /// Tabulate `f(i, j)` for every `i <= j`. Rows are filled in parallel;
    /// each entry depends only on its own indices.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut out = Self::zeros(grid);
        out.fill_rows(|i, row| {
            for (off, v) in row.iter_mut().enumerate() {
                *v = f(i, i + off);
            }
        });
        out
    }

    /// Run `fill(i, row)` on every row in parallel; `row[k]` is column `i + k`.
    pub fn fill_rows(&mut self, fill: impl Fn(usize, &mut [f64]) + Sync) {
        let n = self.grid.n_steps();
        let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(n + 1);
        let mut rest = self.values.as_mut_slice();
        for i in 0..=n {
            let (head, tail) = rest.split_at_mut(n + 1 - i);
            rows.push((i, head));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(i, row)| fill(i, row));
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let n = self.grid.n_steps();
        debug_assert!(i <= j && j <= n, "({i}, {j}) outside the upper triangle");
        row_offset(n, i) + (j - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.index(i, j);
        self.values[k] = v;
    }

    /// Row `i`, columns `i..=n`.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let start = row_offset(n, i);
        &self.values[start..start + n + 1 - i]
    }

    /// Entries in row-major order over the triangle.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.grid.n_steps();
        (0..=n).flat_map(move |i| (i..=n).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Max-norm distance to another grid on the same time grid.
    pub fn max_abs_diff(&self, other: &KernelGrid) -> f64 {
        assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn add_assign(&mut self, other: &KernelGrid) {
        assert_eq!(self.grid, other.grid);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_layout_covers_triangle_once() {
        let g = TimeGrid::new(1.0, 7).unwrap();
        let k = KernelGrid::from_fn(g, |i, j| (i * 100 + j) as f64);
        let mut seen = Vec::new();
        for i in 0..=7 {
            for j in i..=7 {
                assert_eq!(k.get(i, j), (i * 100 + j) as f64);
                seen.push(k.index(i, j));
            }
            assert_eq!(k.row(i).len(), 8 - i);
            assert_eq!(k.row(i)[0], (i * 101) as f64);
        }
        seen.sort();
        assert_eq!(seen, (0..k.values.len()).collect::<Vec<_>>());
    }

    #[test]
    fn trapezoid_is_exact_for_linear_integrands() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        let dt = g.dt();
        let v = trapezoid(dt, 2, 6, |k| 3.0 * g.node(k) + 1.0);
        let (a, b) = (g.node(2), g.node(6));
        let exact = 1.5 * (b * b - a * a) + (b - a);
        assert!((v - exact).abs() < 1e-14);
        assert_eq!(trapezoid(dt, 3, 3, |_| 1.0), 0.0);
    }

    #[test]
    fn tail_integrals_match_direct_rule() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let f = g.tabulate(|t| (2.0 * t).sin());
        let tails = tail_integrals(&g, &f);
        for (i, tail) in tails.iter().enumerate() {
            let direct = trapezoid(g.dt(), i, 10, |k| f[k]);
            assert!((tail - direct).abs() < 1e-15);
        }
        assert_eq!(tails[10], 0.0);
    }

    #[test]
    fn weights_sum_to_interval_length() {
        let dt = 0.1;
        for (lo, hi) in [(0, 0), (0, 1), (2, 9)] {
            let s: f64 = (lo..=hi).map(|k| trapezoid_weight(dt, lo, hi, k)).sum();
            assert!((s - dt * (hi - lo) as f64).abs() < 1e-15);
        }
    }
}
