//! Stacked primal-dual hybrid gradient (PDHG) optimisation for tomographic
//! imaging.
//!
//! The crate is `no_std` and only needs an allocator. It contains:
//!
//! * [`linop`]: the matrix-free linear operator contract, power-method norm
//!   estimation, composition and block stacking.
//! * [`tomo`]: image grids, scan geometry and the concrete imaging operators
//!   (fan-beam projector, finite differences, filters, blur).
//! * [`prox`]: closed-form proximal maps used by the dual and primal updates.
//! * [`pdhg`]: step-parameter derivation from `(beta, gamma)` and the
//!   relaxed PDHG iteration over stacked operators.
//! * [`problems`]: builders for the directional-TV reconstruction problems and
//!   the least-squares baselines.
//! * [`phantom`]: geometric phantoms with analytic line integrals and Poisson
//!   noise.
//!
//! File formats and the command-line front end live in the `tomopd` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod linop;
pub mod pdhg;
pub mod phantom;
pub mod problems;
pub mod prox;
pub mod tomo;

mod vecops;

pub use linop::{
    BlockOperator, LinearOperator, OpRef, OperatorError, OperatorShape, PowerConfig,
};
pub use tomo::{Axis, GridSpec, ImageGrid, ScanGeometry, Sinogram};
pub use pdhg::{
    derive_step_params, solve, Clock, ConvergenceLog, DualTerm, IterateState, LogSample, NullClock, PrimalTerm,
    ProblemSpec, SolveError, SolveOptions, StepConfig, StepParams,
};
