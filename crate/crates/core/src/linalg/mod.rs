//! Dense linear algebra substrate: matrices, thin SVD, symmetric
//! eigendecomposition and seeded initialization.

mod eigen;
mod matrix;
mod rng;
mod svd;

pub use eigen::{condition_number, symmetric_eigen, SymmetricEigen};
pub use matrix::{dot, norm, Matrix};
pub use rng::SeededRng;
pub use svd::{first_r_left_singular_vectors, thin_svd, ThinSvd, SVD_TOLERANCE};

use crate::error::{Error, Result};

/// Half-width of the Kaiming-uniform interval for a given fan-in (ReLU gain √2).
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Entries i.i.d. uniform on `±√(6/cols)`; `cols` is the fan-in.
pub fn kaiming_uniform_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "kaiming init needs positive dimensions, got {rows}x{cols}"
        )));
    }
    let bound = kaiming_bound(cols);
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        rng.uniform(-bound, bound)
    }))
}
