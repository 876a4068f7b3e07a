//! Equilibrium computation for the common-agency game played at each
//! decoding step between several reward principals and a frozen language
//! model policy.
//!
//! * [`game`]: data model, agent best response, utilities and gradients.
//! * [`principal`]: one principal's box-constrained subproblem.
//! * [`jacobi`]: the best-response loop and its stationarity certificate.
//! * [`potential`]: surplus-potential maximizers, minimum-cost incentives and a
//!   grid brute-force search for small games.
//! * [`diagnostics`]: regret, stability threshold and perturbation probes.
//! * [`metrics`]: hypervolume, mean inner product and Pareto filtering.
//! * [`decode`]: token-level decoding over recorded logit streams.
//! * [`sweep`]: preference grids and parallel decode sweeps.

pub mod decode;
pub mod diagnostics;
pub mod error;
pub mod game;
pub mod jacobi;
pub mod metrics;
pub mod potential;
pub mod principal;
pub mod sweep;

pub use error::{CageError, Result};
