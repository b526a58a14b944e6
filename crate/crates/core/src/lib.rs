//! Numerical lab for the spectral and nonlinear stability of periodic
//! Lugiato-Lefever waves under subharmonic perturbations.

pub mod bloch;
pub mod damping;
pub mod evolution;
pub mod experiments;
pub mod fit;
pub mod linalg;
pub mod modulation;
pub mod profile;
pub mod semigroup;
pub mod spectral;
