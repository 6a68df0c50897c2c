//! Objective, optimisation loop and checkpoints.

mod checkpoint;
mod fit;
mod losses;
#[cfg(test)]
mod tests;

pub use checkpoint::Checkpoint;
pub use fit::{batch_indices, fit, fit_from, train_step, TrainConfig};
pub use losses::{
    consistency_point, group_embeddings, latent_kl, loss_consistency, loss_kl, loss_reconstruction,
    phase_separation, select_pairs, total_loss, Ablation, LossParts, LossWeights, Pairing, Separation, TrainRecord,
};
