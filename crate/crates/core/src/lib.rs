//! Quality-prior guided dual-codebook vector quantization for image
//! restoration, sized to run and train on a single CPU core.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: tensors, reverse-mode differentiation, gradient checking.
//! - [`quality`]: differentiable no-reference quality proxies, corpus
//!   normalization, ensembling and binning.
//! - [`degrade`]: blur / resample / noise / JPEG degradation pipeline.
//! - [`vq`]: codebooks, nearest-entry quantization, dual-codebook fusion.
//! - [`models`]: encoder, decoder, discriminator, perceptual features,
//!   score embedding and the code-prediction transformer.
//! - [`train`]: stage-I and stage-II training, restoration, quality
//!   optimization and evaluation.
//! - [`corpus`]: synthetic image corpus with nonuniform intrinsic quality.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod image;
pub mod models;
pub mod numeric;
pub mod quality;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use numeric::{Tape, Tensor, Var};
