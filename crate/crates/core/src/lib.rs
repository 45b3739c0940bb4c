//! Sparse linear-algebra toolkit: CSR matrices, finite-difference
//! discretizations, Krylov solvers, classical preconditioners and dense
//! spectral diagnostics.

pub mod discretize;
pub mod error;
pub mod io;
pub mod krylov;
pub mod precond;
pub mod sparse;
pub mod spectral;

pub use discretize::{assemble, sample_grf, sample_rhs, Coefficient, GridSpec, GrfSpec, PdeFamily};
pub use error::{Error, Result};
pub use krylov::{
    cg_solve, gmres_solve, record_dataset, IdentityPrecond, Preconditioner, Snapshot, SolveConfig,
    SolveTrace, SolverKind,
};
pub use precond::{ExactInverse, StationaryKind, StationaryPrecond, TwoGridPrecond};
pub use sparse::CsrMatrix;
