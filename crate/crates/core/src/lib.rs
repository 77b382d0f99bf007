//! Incremental penalty methods for strongly convex quadratics over polyhedra.
//!
//! The constraint set is replaced by a one-sided Huber penalty whose weight
//! grows and whose smoothing width shrinks along the iteration, and each step
//! touches a single randomly sampled constraint.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod oracle;
pub mod penalty;
pub mod problem;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};
pub use oracle::{
    minimize_penalized, project_polyhedron, rate_fit, solve_constrained_exact, OracleSolution,
    RateFit,
};
pub use penalty::{Halfspace, PenaltyParams};
pub use problem::{generate_problem, ConstrainedProblem, GeneratorSpec, QuadraticObjective};
pub use schedule::Schedule;
pub use solver::{run, SolverConfig, SolverTrace};
