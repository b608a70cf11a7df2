//! Deterministic optical-degradation simulation and dataset generation.
//!
//! The crate models the full imaging chain of a minimalist optical system:
//! sequential ray tracing through spherical lens prescriptions ([`optics`]),
//! point-spread-function synthesis over the image plane ([`psf`]), spatially
//! variant patch-wise convolution ([`degrade`]), and a forward/inverse camera
//! ISP ([`isp`]). On top of the simulation sit a reproducible two-domain
//! dataset generator ([`datagen`]), referenced image-quality metrics
//! ([`metrics`]), and pure numeric kernels for codebook quantization and
//! adversarial losses ([`qdmr`]).
//!
//! Everything is deterministic: all randomness derives from explicit seeds
//! via labeled key derivation ([`rng`]), and results are bit-identical under
//! any thread count.

pub mod datagen;
pub mod degrade;
pub mod error;
pub mod image_buf;
pub mod isp;
pub mod metrics;
pub mod optics;
pub mod psf;
pub mod qdmr;
pub mod rng;

pub use degrade::DegradeConfig;
pub use error::{Error, Result};
pub use image_buf::ImageBuf;
pub use isp::IspParams;
pub use optics::{LensPrescription, MaterialDispersion, Ray, Surface};
pub use psf::{PsfGrid, PsfKernel, PupilSampling};
