//! Attention networks: encoder, conditional prior, decoder, trajectory
//! predictor, and group generation.

mod config;
mod generate;
mod layers;
mod model;

pub use config::ModelConfig;
pub use generate::{generate_group, generate_with_noise, GenerationOptions, GenerationReport};
pub use layers::{AttentionBlock, LayerNorm, Linear};
pub use model::{latent_noise, mean_latent, sample_latent, Latent, LatentMode, PdvaeModel};
