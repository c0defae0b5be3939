//! Structure-preserving integrators for ordinary differential equations.

pub mod composition;
pub mod driver;
pub mod error;
pub mod exponential;
pub mod fd;
pub mod harness;
pub mod integral;
pub mod kahan;
pub mod liegroup;
pub mod order;
pub mod polynomial;
pub mod problem;
pub mod problems;
pub mod schrodinger;
pub mod solver;
pub mod state;
pub mod symplectic;
pub mod volume;

pub use driver::{solve, Bound, FieldMethod, Observer, Stepper};
pub use error::{Error, Result};
pub use problem::{FnField, SecondOrderProblem, VectorField};
pub use solver::SolverSettings;
pub use state::{state, State, Trajectory};
