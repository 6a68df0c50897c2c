//! Differentiable numerics: tensors, the gradient tape, the real DFT,
//! Gaussian helpers, Adam and the finite-difference checker.

mod dft;
mod distributions;
mod gradcheck;
mod optim;
mod params;
mod siren;
mod tape;
mod tensor;

pub use dft::{dft_real, dft_tables, ComplexCoefficients};
pub use distributions::{gaussian_kl, reparameterize};
pub use gradcheck::{grad_check, grad_check_coords};
pub use optim::{adam_step, adam_step_store, AdamConfig, OptimizerState};
pub use params::{Bound, ParamId, ParamStore};
pub use siren::{siren_activation, siren_bound, siren_init};
pub use tape::{concat_cols, concat_rows, Gradients, Tape, Var, TAU};
pub use tensor::{element_counts, reset_peak, ElementCounts, Tensor};
