//! Crate-wide error type.
//!
//! Variants group into the three failure classes surfaced by the CLI:
//! configuration (bad inputs, shape mismatches), geometry (rays that cannot
//! be traced, degenerate bundles), and I/O.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, prescription, or parameter set.
    #[error("config: {0}")]
    Config(String),

    /// Tensor/image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Ray geometry failure (missed surface, non-positive path, afocal system).
    #[error("geometry: {0}")]
    Geometry(String),

    /// A field bundle lost every ray, so no PSF can be formed.
    #[error("degenerate field: {0}")]
    DegenerateField(String),

    /// Snell radicand went negative; the ray does not transmit.
    #[error("total internal reflection")]
    TotalInternalReflection,

    /// Perturbed prescription failed to trace after all retries.
    #[error("perturbation: {0}")]
    Perturbation(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 2 config, 3 geometry/degenerate, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Parse(_) => 2,
            Error::Geometry(_)
            | Error::DegenerateField(_)
            | Error::TotalInternalReflection
            | Error::Perturbation(_) => 3,
            Error::Io(_) | Error::Image(_) => 4,
        }
    }
}
