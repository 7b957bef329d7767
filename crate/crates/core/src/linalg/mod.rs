//! Dense matrix primitives for small systems.

mod eig;
mod mat;
mod norm;

use num_complex::Complex64;
use thiserror::Error;

pub use eig::{
    eig_general, eig_penalty, eig_penalty_gradient, eigenvalues, spectral_abscissa, EigenDecomp,
    PenaltyGradient, DEFECTIVE_TOL,
};
pub use mat::{dot, norm2, Mat};
pub use norm::{covariate_bound, spectral_norm, SpectralNorm, SINGULAR_GAP_TOL};

#[derive(Debug, Clone, Error)]
pub enum LinalgError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("QR iteration did not converge after {sweeps} sweeps ({} eigenvalues found)", partial.len())]
    NoConvergence {
        sweeps: usize,
        partial: Vec<Complex64>,
    },
    #[error("domain error: {0}")]
    Domain(String),
}
