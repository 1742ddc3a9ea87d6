//! Segmentation-aware deep fusion networks for compressed-sensing MRI.
//!
//! This crate implements, from the ground up, a small research stack for
//! under-sampled MRI reconstruction in which a segmentation network's
//! multi-scale features are fused into a cascaded reconstruction network:
//!
//! * [`tensor`] — dense tensors, a reverse-mode autodiff tape, the layer
//!   kernels (convolutions, pooling, bilinear upsampling, batch norm,
//!   softmax, losses), an Adam optimizer, and a finite-difference
//!   gradient checker.
//! * [`mri`] — the measurement model: unitary 2-D FFTs, k-space sampling
//!   masks, under-sampling, zero-filled reconstruction, and the
//!   data-fidelity projection, together with its autodiff operator.
//! * [`net`] — network descriptions and graph builders for the cascaded
//!   reconstruction network, the U-Net segmenter, the feature-aggregation
//!   and fusion stages, and a same-capacity control network, plus
//!   parameter stores, initialization, and checkpoint I/O.
//! * [`phantom`] — a synthetic brain-phantom generator with ground-truth
//!   tissue labels, augmentation, dataset I/O, and intensity histograms.
//! * [`train`] — losses and the staged training drivers (reconstruction
//!   pretraining, segmentation pretraining, fusion fine-tuning, and a
//!   cascade baseline).
//! * [`metrics`] — PSNR/SSIM for images, Dice/HD95/AVD for segmentations,
//!   and the evaluation report.
//! * [`cli`] — the `sadfn` command-line tool.
//!
//! Everything numeric is generic over the scalar type via [`Real`]
//! (`f32` or `f64`): training runs in single precision, gradient checks
//! in double precision. Concrete aliases for the common instantiations
//! are exported at the crate root.

pub mod cli;
pub mod metrics;
pub mod mri;
pub mod net;
pub mod pgm;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Real;

/// Tensor in training precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor in gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Autodiff graph in training precision.
pub type Graph32 = tensor::Graph<f32>;
/// Autodiff graph in gradient-check precision.
pub type Graph64 = tensor::Graph<f64>;
/// Complex k-space grid in training precision.
pub type ComplexGrid32 = mri::ComplexGrid<f32>;
/// Complex k-space grid in gradient-check precision.
pub type ComplexGrid64 = mri::ComplexGrid<f64>;

/// Crate-wide error type.
///
/// Every fallible public operation returns [`Result`]; errors carry enough
/// context (names, shapes, paths) to be actionable from the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/grid shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    /// Invalid argument, configuration, or state; message is self-contained.
    #[error("{0}")]
    Invalid(String),
    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    /// Filesystem error annotated with the offending path.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not parse as the expected format.
    #[error("parse error in {path}: {msg}")]
    Parse {
        path: std::path::PathBuf,
        msg: String,
    },
}

impl Error {
    /// Convenience constructor for [`Error::ShapeMismatch`].
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Convenience constructor for [`Error::Io`].
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for [`Error::Parse`].
    pub fn parse(path: impl Into<std::path::PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Version string embedded at build time (crate version plus git describe
/// when available); recorded in run logs.
pub const BUILD_VERSION: &str = env!("SADFN_BUILD_VERSION");
