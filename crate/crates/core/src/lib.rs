//! Video-latent noise prediction toolkit.
//!
//! Functionality is organized as a pipeline:
//!
//! * [`tensor`] / [`linalg`] — dense rank-4 tensor algebra, SVD, seeded
//!   Gaussian sampling.
//! * [`tucker`] — per-sample Tucker factorization (HOSVD) with fixed ranks.
//! * [`spectral`] — 3-D FFT, Gaussian low-pass masks, frequency-domain noise
//!   recombination, and latent-level diagnostics.
//! * [`oracle`] — the iterative noise-refinement loop that manufactures
//!   refined-noise targets from a pluggable denoiser.
//! * [`pndata`] — the binary prompt/noise pair dataset, its generator, and
//!   dataset statistics.
//! * [`tape`] — reverse-mode differentiation over the learnable subgraph.
//! * [`vnpnet`] — the noise prediction network: structured filter branch
//!   plus a token-based contextual residual branch.
//! * [`train`] — loss, AdamW, cosine schedule, gradient verification, and
//!   the training loop.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); tests are
//! written against `f64`, storage formats and the CLI default to `f32`.

pub mod error;
pub mod hash;
pub mod linalg;
pub mod oracle;
pub mod pndata;
pub mod scalar;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod tucker;
pub mod vnpnet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Dims4, LatentTensor, Matrix, RngSeed};
pub use tucker::{TuckerFactorization, TuckerRanks};

/// Production-precision latent tensor.
pub type Latent32 = LatentTensor<f32>;
/// Test-precision latent tensor.
pub type Latent64 = LatentTensor<f64>;
