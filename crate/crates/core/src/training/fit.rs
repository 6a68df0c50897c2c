//! The training loop.
//!
//! Every random choice of step `s` is derived from `(seed, s)` alone, so a
//! run resumed from a checkpoint at step `s` replays exactly what an
//! uninterrupted run would have done.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{total_loss, Ablation, LossWeights, Pairing, TrainRecord};
use crate::diffmath::{adam_step_store, AdamConfig, OptimizerState, Tape};
use crate::error::{Error, Result};
use crate::motion::GroupSample;
use crate::networks::PdvaeModel;

const NOISE_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Optimizer steps per call to [`fit`].
    pub steps: usize,
    /// Groups per step; a batch element is a whole group.
    pub batch_groups: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub disable_consistency: bool,
    pub disable_phase_manifold: bool,
    pub pairing: Pairing,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            steps: 2000,
            batch_groups: 4,
            seed: 0,
            weights: LossWeights::default(),
            disable_consistency: false,
            disable_phase_manifold: false,
            pairing: Pairing::default(),
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if self.batch_groups == 0 {
            return Err(Error::Invalid("batch_groups must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Invalid("clip_norm must be finite and non-negative".into()));
        }
        self.weights.validate()
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_consistency: self.disable_consistency,
            disable_phase_manifold: self.disable_phase_manifold,
        }
    }
}

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Group indices of step `step`: consecutive slices of per-epoch shuffles.
pub fn batch_indices(groups: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|pos| {
            let epoch = pos / groups;
            if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut order: Vec<usize> = (0..groups).collect();
                order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM, epoch as u64));
                epoch_cache = Some((epoch, order));
            }
            epoch_cache.as_ref().expect("filled above").1[pos % groups]
        })
        .collect()
}

/// One optimizer step on `batch`; parameters are untouched on error.
pub fn train_step(
    model: &mut PdvaeModel,
    optimizer: &mut OptimizerState,
    batch: &[&GroupSample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<TrainRecord> {
    let mut noise_rng = stream_rng(cfg.seed, NOISE_STREAM, step as u64);
    let mut pair_rng = stream_rng(cfg.seed, PAIR_STREAM, step as u64);
    let diverged = |detail: String| Error::Diverged { step, detail };
    let (record, grads_ok) = {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let parts = total_loss(
            &tape,
            &bound,
            model,
            batch,
            &cfg.weights,
            &cfg.ablation(),
            cfg.pairing,
            &mut noise_rng,
            &mut pair_rng,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e.to_string()),
            other => other,
        })?;
        let record = parts.record(step);
        if !record.is_finite() {
            return Err(diverged(record.log_line()));
        }
        let grads = parts.total.backward().map_err(|e| diverged(e.to_string()))?;
        drop(parts);
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate_grads(&bound, &grads);
        (record, params.grad_norm())
    };
    if !grads_ok.is_finite() {
        return Err(diverged(format!("gradient norm {grads_ok}; {}", record.log_line())));
    }
    let params = model.params_mut();
    if cfg.clip_norm > 0.0 && grads_ok > cfg.clip_norm {
        params.scale_grads(cfg.clip_norm / grads_ok);
    }
    adam_step_store(params, optimizer, &cfg.adam)?;
    Ok(record)
}

/// Runs `cfg.steps` steps starting at `optimizer.step`, calling `on_record`
/// after each one.
pub fn fit_from(
    model: &mut PdvaeModel,
    dataset: &[GroupSample],
    cfg: &TrainConfig,
    optimizer: &mut OptimizerState,
    mut on_record: impl FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training needs at least one group".into()));
    }
    let c = model.config();
    for g in dataset {
        let d = &g.dancers[0];
        if d.joints() != c.joints || d.frames() != c.frames || g.conditioning.dim() != c.cond_dim {
            return Err(Error::Shape(format!(
                "group {} is {} joints x {} frames with {}-dim conditioning; model wants {} x {} with {}",
                g.group_id,
                d.joints(),
                d.frames(),
                g.conditioning.dim(),
                c.joints,
                c.frames,
                c.cond_dim
            )));
        }
    }
    let start = optimizer.step as usize;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in start..start + cfg.steps {
        let batch: Vec<&GroupSample> = batch_indices(dataset.len(), cfg.batch_groups, cfg.seed, step)
            .into_iter()
            .map(|i| &dataset[i])
            .collect();
        let record = train_step(model, optimizer, &batch, cfg, step)?;
        on_record(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Trains from a fresh optimizer state.
pub fn fit(model: &mut PdvaeModel, dataset: &[GroupSample], cfg: &TrainConfig) -> Result<Vec<TrainRecord>> {
    let mut optimizer = OptimizerState::for_store(model.params());
    fit_from(model, dataset, cfg, &mut optimizer, |_| Ok(()))
}
