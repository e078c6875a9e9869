//! Overfitted neural image codec.
//!
//! An image is compressed by overfitting a tiny neural decoder (latent
//! pyramid, autoregressive entropy model, upsampling, synthesis) to that
//! single image, then transmitting the quantized decoder parameters and
//! the entropy-coded latents in one bitstream. A non-overfitted mode
//! replaces the per-image optimization with a feed-forward analysis
//! transform sharing one decoder across images.

pub mod analysis;
pub mod arm;
pub mod decoder;
pub mod encoder;
pub mod entropy;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod ppm;
pub mod tensor;

pub use error::{CodecError, Result};
