//! Numerical verification: finite-difference gradient checks and the
//! equivalence checks between alternative module formulations.

pub mod equiv;
pub mod gradcheck;
