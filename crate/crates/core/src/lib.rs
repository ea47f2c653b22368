//! Explicit solution triplets `(Y, Z, K)` for linear backward stochastic
//! Volterra integral equations driven by a Brownian motion and a compensated
//! Poisson random measure with finitely many marks.
//!
//! The pipeline is:
//!
//! 1. [`scenario`]: parse and validate a problem description,
//! 2. [`resolvent`]: iterated kernels and the Neumann-series resolvent,
//! 3. [`simulate`]: jump-diffusion path ensembles and measure-change weights,
//! 4. [`solver`]: the affine solution `Y`, the process `U`, and the `Z`, `K` grids,
//! 5. [`verify`]: pathwise residuals and regression oracles.

pub mod expr;
pub mod grid;
pub mod kernel;
pub mod output;
pub mod resolvent;
pub mod scenario;
pub mod simulate;
pub mod solver;
pub mod stats;
pub mod verify;

pub use grid::TimeGrid;
pub use kernel::KernelGrid;
pub use resolvent::ResolventTable;
pub use scenario::Scenario;
pub use simulate::{GirsanovWeights, PathEnsemble};
pub use solver::{AffineSolution, SolutionTriplet};

pub use verify::VerificationReport;
