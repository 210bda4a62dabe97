use ndarray::Array1;
use num_complex::Complex64;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("unsupported quadrature pattern: {0}")]
    UnsupportedQuadrature(String),

    #[error("krylov iteration did not converge: residual estimate {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Convergence { residual: f64, tolerance: f64 },

    #[error("resource guard tripped: {0}")]
    Resource(String),

    #[error("accuracy target not met: {0}")]
    Accuracy(String),

    /// Richardson validation of a fine-step reference failed; both candidate
    /// states are carried so the caller can inspect the disagreement.
    #[error("reference solution failed Richardson validation: relative difference {rel_diff:.3e}")]
    ReferenceUnconverged {
        rel_diff: f64,
        base: Array1<Complex64>,
        halved: Array1<Complex64>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
