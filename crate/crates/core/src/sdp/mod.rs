//! Structured semidefinite programming: block-wise LMI modeling and an
//! interior-point solver.
//!
//! A [`ConicProgram`] collects matrix- and scalar-valued decision variables
//! and affine PSD block constraints assembled cell by cell through a
//! [`BlockBuilder`]; scalar inequalities enter as 1x1 blocks so the solver
//! sees a uniform cone. [`solve`] runs a homogeneous slack-maximization
//! feasibility phase and, when an objective is present, a second
//! minimization phase, and certifies the outcome by direct eigenvalue
//! re-verification of every block at the returned point.

mod program;
mod solver;

pub use program::{
    Assignment, BlockBuilder, ConicProgram, SdpError, VarId, VarKind,
};
pub use solver::{
    solve, ConicSolution, SolveOptions, SolveStatus, FEAS_TOL, MAX_ITERATIONS,
};
