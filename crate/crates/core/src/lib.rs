//! Gradient flows of nonlocal energies with inhomogeneous growth on finite
//! reversible random walk spaces.
//!
//! The crate simulates the differential inclusion `u_t ∈ -∂F(u) + f` for
//! energies that mix total-variation and power growth across two random walk
//! structures, or across a partition of one structure's support. It provides:
//!
//! - [`space`]: finite reversible random walk spaces (weighted graphs,
//!   kernel discretizations) and the nonlocal calculus on them;
//! - [`problem`]: the energy functionals, their Laplacians, and validity
//!   bookkeeping;
//! - [`prox`]: the proximal resolvent with dual certificates;
//! - [`flow`]: implicit Euler integration plus conservation, contraction,
//!   decay, and extinction checks;
//! - [`exact`]: an event-driven exact integrator for finite-graph flows that
//!   tracks the sign pattern on TV edges and solves the reduced smooth ODE
//!   within each mode;
//! - [`poincare`]: estimation and verification of the Poincaré constants the
//!   decay bounds consume;
//! - [`kernel`]: kernel-discretized boxes in `R^N` at desk scale.

pub mod cert;
pub mod exact;
pub mod flow;
pub mod kernel;
pub mod poincare;
pub mod problem;
pub mod prox;
pub mod space;

mod linalg;
mod ode;

pub use cert::{tv_certificate_check, CertPart, SubgradientCertificate, TvCheckReport};
pub use problem::{
    p_laplacian, p_laplacian_weighted, EdgeWeights, EnergyModel, Growth, PartitionProblem,
    Problem, ProblemError, TwoStructureProblem, ValidityFlags,
};
pub use prox::{ProxError, ProxSolution, ProxSolver};
pub use space::{EdgeField, RandomWalkSpace, SpaceError};
