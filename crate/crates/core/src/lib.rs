//! Numerical laboratory for conservation laws of bias-free MLPs under
//! gradient descent: exact drift accounting, the spectral crossover formula
//! for the gradient imbalance sum, mode coefficients, and cross-entropy
//! Hessian compression.

pub mod error;
pub mod data;
pub mod model;
pub mod numerics;
pub mod training;
pub mod conservation;
pub mod spectral;
pub mod fitting;
pub mod theory;
pub mod experiments;
pub mod plot;

pub use error::{Error, Result};
