//! Gaussian-splat video tokenizer.
//!
//! A video clip is encoded to a latent grid, embedded into a set of 2D
//! Gaussians by a spatio-temporal transformer, partitioned into static and
//! dynamic subsets by a learned binary mask, coefficient-quantized against a
//! codebook, rasterized back into latent tokens, decoded to pixels, and
//! serialized into a bit-exact compressed stream.
//!
//! Module map:
//! - [`numerics`]: tensors, the reverse-mode tape, finite-difference checks
//! - [`gaussian2d`]: splat parameterization, covariance math, geometry bits
//! - [`rasterizer`]: radiance-weighted token rendering with analytic grads
//! - [`attention`]: factorized spatio-temporal attention and the deformable
//!   fusion block that routes latent features into Gaussian queries
//! - [`stge`]: latent video → Gaussian set embedding network
//! - [`gsp`]: static/dynamic partitioning mask, its regularizer, token math
//! - [`vq`]: coefficient codebook, nearest-codeword lookup, commitment loss
//! - [`pipeline`]: stand-in encoder/decoder, losses, training loop
//! - [`codec`]: bit-exact token stream serialization and rate accounting
//! - [`synth`], [`metrics`], [`clipio`]: synthetic clips, PSNR/SSIM, clip IO

pub mod attention;
pub mod clipio;
pub mod codec;
pub mod config;
pub mod gaussian2d;
pub mod gradsuite;
pub mod gsp;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod rasterizer;
pub mod synth;
pub mod stge;
pub mod vq;
