use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid.n_steps must be positive, got {0}")]
    NoSteps(usize),
    #[error("grid.T must be finite and positive, got {0}")]
    BadHorizon(f64),
}

/// Uniform time grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self, GridError> {
        if n_steps == 0 {
            return Err(GridError::NoSteps(n_steps));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_i`. The last node is `T` exactly.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.node(i))
    }

    /// Tabulate `f` on every node.
    pub fn tabulate(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_increasing_and_end_at_horizon() {
        for &(horizon, n) in &[(1.0, 1), (1.0, 3), (0.7, 200), (13.1, 97)] {
            let g = TimeGrid::new(horizon, n).unwrap();
            let nodes: Vec<f64> = g.nodes().collect();
            assert_eq!(nodes.len(), n + 1);
            assert_eq!(nodes[0], 0.0);
            assert_eq!(*nodes.last().unwrap(), horizon);
            assert!(nodes.windows(2).all(|w| w[0] < w[1]));
            let err = (g.dt() * n as f64 - horizon).abs();
            assert!(err <= f64::EPSILON * horizon, "dt*n off by {err}");
        }
    }

    #[test]
    fn rejects_empty_grid() {
        assert_eq!(TimeGrid::new(1.0, 0), Err(GridError::NoSteps(0)));
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }
}
