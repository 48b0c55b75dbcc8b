//! Numerical laboratory for Dirichlet eigenvalues of planar domains with a
//! small removed segment.

pub mod geometry;
pub mod fem;
pub mod eigensolve;
pub mod asymptotics;
pub mod analytic;
pub mod capacity;
pub mod experiments;
