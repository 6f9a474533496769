//! Split-latent permutation autoencoder for epoch-structured multichannel
//! time-series: a tape-based autodiff core, the split-latent model, its loss
//! family and named variants, class-structured batching, training, latent
//! evaluation, and zero-shot epoch conversion.

pub mod batching;
pub mod conversion;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
