//! Dense linear algebra, symmetric eigensolvers and the seeded random source.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{
    power_iteration, power_iteration_from, subspace_iteration, sym_eig, EigenDecomposition, PowerResult, SubspaceResult,
};
pub use matrix::{dot, norm, Matrix};
pub use rng::Rng;

use crate::error::{invalid, Result};

/// Matrix of i.i.d. `N(0, std²)` entries drawn row-major from `rng`.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std > 0.0) || !std.is_finite() {
        return invalid(format!("gaussian_matrix needs std > 0, got {std}"));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| std * rng.normal()))
}
