//! Group generation: one prior pass, then one decode per dancer.
//!
//! The prior's outputs are copied off its tape before any dancer is
//! decoded, and every dancer runs on a fresh tape that is dropped before
//! the next one starts. Only the finished motions (plain vectors) grow
//! with the dancer count, so the tensor working set does not.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{latent_noise, sample_latent, Latent, LatentMode, PdvaeModel};
use crate::diffmath::{element_counts, reset_peak, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::motion::{formation_offsets, ConditioningFeatures, GroupSample, MotionSequence};
use crate::phase::PhaseDistribution;

/// Tape-free copy of a prior result.
struct FrozenLatent {
    curves: Arc<Tensor>,
    dist: [Arc<Tensor>; 6],
}

impl FrozenLatent {
    fn freeze(latent: &Latent<'_>) -> Self {
        let d = &latent.dist;
        FrozenLatent {
            curves: latent.curves.value(),
            dist: [d.mu_a, d.mu_f, d.mu_b, d.mu_s, d.sigma_a, d.sigma_s].map(|v| v.value()),
        }
    }

    fn thaw<'t>(&self, tape: &'t Tape) -> Latent<'t> {
        let c = |t: &Arc<Tensor>| -> Var<'t> { tape.leaf(Arc::clone(t), false) };
        Latent {
            curves: c(&self.curves),
            dist: PhaseDistribution {
                mu_a: c(&self.dist[0]),
                mu_f: c(&self.dist[1]),
                mu_b: c(&self.dist[2]),
                mu_s: c(&self.dist[3]),
                sigma_a: c(&self.dist[4]),
                sigma_s: c(&self.dist[5]),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub mode: LatentMode,
    /// Formation spacing in metres; dancers are placed on a centered grid.
    pub spacing: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            mode: LatentMode::Phase,
            spacing: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub group: GroupSample,
    /// Prior evaluations made by this call.
    pub prior_calls: u64,
    /// Peak live tensor elements above the level at entry.
    pub peak_working_elements: usize,
}

/// Generates `dancers` motions for one conditioning track.
pub fn generate_group(
    model: &PdvaeModel,
    cond: &ConditioningFeatures,
    dancers: usize,
    seed: u64,
    options: &GenerationOptions,
) -> Result<GenerationReport> {
    if dancers == 0 {
        return Err(Error::Invalid("generation needs at least one dancer".into()));
    }
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // noise is drawn per dancer so nothing but the outputs scales with the count
    run(model, cond, dancers, options, |_| latent_noise(&mut rng, options.mode, c.channels, c.frames))
}

/// As [`generate_group`] with explicit per-dancer noise.
pub fn generate_with_noise(
    model: &PdvaeModel,
    cond: &ConditioningFeatures,
    noises: &[Tensor],
    options: &GenerationOptions,
) -> Result<GenerationReport> {
    if noises.is_empty() {
        return Err(Error::Invalid("generation needs at least one dancer".into()));
    }
    run(model, cond, noises.len(), options, |i| noises[i].clone())
}

fn run(
    model: &PdvaeModel,
    cond: &ConditioningFeatures,
    dancers: usize,
    options: &GenerationOptions,
    mut noise_for: impl FnMut(usize) -> Tensor,
) -> Result<GenerationReport> {
    let c = model.config();
    if cond.frames() < c.frames || cond.dim() != c.cond_dim {
        return Err(Error::Shape(format!(
            "conditioning is {}x{}, model needs at least {}x{}",
            cond.frames(),
            cond.dim(),
            c.frames,
            c.cond_dim
        )));
    }
    let calls_before = model.prior_calls();
    let base = element_counts().live;
    reset_peak();

    let cond_tensor = cond.to_tensor();
    let frozen = {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let latent = model.prior(&bound, tape.constant(cond_tensor.clone()))?;
        FrozenLatent::freeze(&latent)
    };
    let window = Arc::new(if cond.frames() == c.frames {
        cond_tensor
    } else {
        Tensor::new(&[c.frames, c.cond_dim], cond.data()[..c.frames * c.cond_dim].to_vec())?
    });

    let slots = formation_offsets(dancers, options.spacing);
    let mut motions = Vec::with_capacity(dancers);
    for (i, slot) in slots.iter().enumerate() {
        let noise = noise_for(i);
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let latent = frozen.thaw(&tape);
        let curves = sample_latent(&latent, options.mode, &noise)?;
        let motion = model.synthesize(&bound, curves, tape.leaf(Arc::clone(&window), false))?;
        let seq = MotionSequence::new(c.joints, c.frames, motion.value().data().to_vec())?;
        motions.push(seq.with_root_shift(*slot));
    }
    drop(frozen);

    let peak = (element_counts().peak - base).max(0) as usize;
    let window_beats: Vec<usize> = cond.beats().iter().copied().filter(|&b| b < c.frames).collect();
    let conditioning = ConditioningFeatures::new(c.frames, c.cond_dim, window.data().to_vec(), window_beats)?;
    Ok(GenerationReport {
        group: GroupSample::new(0, motions, conditioning)?,
        prior_calls: model.prior_calls() - calls_before,
        peak_working_elements: peak,
    })
}
