//! Small dense conic solver for Hermitian semidefinite programs with
//! second-order cone and range constraints.

mod accel;
pub mod error;
pub mod linalg;
pub mod program;
pub mod solver;

pub use error::{ConicError, Result};
pub use linalg::{
    hermitian_embed, hermitian_psd_project, hermitian_unembed, psd_project, rank1_extract, rank_one_factor,
    trace_product, CMatrix, CVector, RankOneFactor, C64,
};
pub use program::{pack_hermitian, unpack_hermitian, ConicProgram, Constraint, ConstraintId, LinExpr, PsdBlock, ScalarVar};
pub use solver::{solve, ConicSolution, Settings, Solver, Status};
