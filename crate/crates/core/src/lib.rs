//! Phase-conditioned dance VAE.
//!
//! A conditional VAE whose latent space is a frequency-domain phase
//! manifold: every latent channel is a sinusoid described by amplitude,
//! frequency, offset and phase shift. Group choreography is generated by
//! running the conditional prior once and decoding any number of dancers
//! from independent draws of the shared phase distribution.

pub mod diffmath;
pub mod error;
pub mod motion;
pub mod networks;
pub mod metrics;
pub mod phase;
pub mod training;

pub use error::{Error, Result};
