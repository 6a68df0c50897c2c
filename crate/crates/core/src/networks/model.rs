use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{AttentionBlock, Linear};
use crate::diffmath::{concat_cols, siren_activation, siren_init, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::phase::{
    curve_dims, extract_phase_distribution, reconstruct_curves, sample_phase, standard_noise,
    PhaseDistribution, PhaseHeads, PhaseSample,
};

/// How latent curves are drawn from a latent distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Sample `(A, S)` and rebuild sinusoidal curves.
    #[default]
    Phase,
    /// Bypass the manifold: raw curves plus per-channel Gaussian noise.
    Direct,
}

/// Latent curves `[D, T]` and the phase distribution extracted from them.
#[derive(Clone, Copy)]
pub struct Latent<'t> {
    pub curves: Var<'t>,
    pub dist: PhaseDistribution<'t>,
}

/// Noise for one draw: `[D, 2]` in phase mode, `[D, T]` in direct mode.
pub fn latent_noise<R: Rng>(rng: &mut R, mode: LatentMode, channels: usize, frames: usize) -> Tensor {
    match mode {
        LatentMode::Phase => standard_noise(rng, channels),
        LatentMode::Direct => {
            let data = (0..channels * frames).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(&[channels, frames], data).expect("consistent shape")
        }
    }
}

/// Draws latent curves `[D, T]` from `latent`.
pub fn sample_latent<'t>(latent: &Latent<'t>, mode: LatentMode, noise: &Tensor) -> Result<Var<'t>> {
    let (d, t) = curve_dims(latent.curves)?;
    match mode {
        LatentMode::Phase => reconstruct_curves(&sample_phase(&latent.dist, noise)?, t),
        LatentMode::Direct => {
            if noise.shape() != [d, t] {
                return Err(Error::Shape(format!("direct latent noise must be [{d}, {t}], got {:?}", noise.shape())));
            }
            let eps = latent.curves.tape().constant(noise.clone());
            latent.curves.add(latent.dist.sigma_a.mul(eps)?)
        }
    }
}

/// Noise-free latent curves: the manifold mean in phase mode, raw curves in direct mode.
pub fn mean_latent<'t>(latent: &Latent<'t>, mode: LatentMode) -> Result<Var<'t>> {
    match mode {
        LatentMode::Phase => reconstruct_curves(&latent.dist.mean_sample(), curve_dims(latent.curves)?.1),
        LatentMode::Direct => Ok(latent.curves),
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    motion_in: Linear,
    cond_in: Linear,
    blocks: Vec<AttentionBlock>,
    to_latent: Linear,
}

#[derive(Debug, Clone)]
struct Prior {
    cond_in: Linear,
    blocks: Vec<AttentionBlock>,
    to_latent: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    curves_in: Linear,
    cond_in: Linear,
    blocks: Vec<AttentionBlock>,
    to_pose: Linear,
}

/// Causal temporal convolutions; weights are `[kernel * in, out]`.
#[derive(Debug, Clone)]
struct Trajectory {
    convs: Vec<Linear>,
}

/// Encoder, prior, decoder, shared phase heads and trajectory predictor.
#[derive(Debug)]
pub struct PdvaeModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    prior: Prior,
    decoder: Decoder,
    heads: PhaseHeads,
    trajectory: Trajectory,
    prior_calls: AtomicU64,
}

impl Clone for PdvaeModel {
    fn clone(&self) -> Self {
        PdvaeModel {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            prior: self.prior.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads,
            trajectory: self.trajectory.clone(),
            prior_calls: AtomicU64::new(self.prior_calls()),
        }
    }
}

fn blocks<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: &ModelConfig) -> Vec<AttentionBlock> {
    (0..c.layers)
        .map(|l| AttentionBlock::new(store, rng, &format!("{prefix}.block{l}"), c.hidden, c.heads, c.ffn, c.omega))
        .collect()
}

fn check_rows(what: &str, v: Var<'_>, rows: usize, cols: usize) -> Result<()> {
    if v.shape() != [rows, cols] {
        return Err(Error::Shape(format!("{what} must be [{rows}, {cols}], got {:?}", v.shape())));
    }
    Ok(())
}

impl PdvaeModel {
    /// Parameters are drawn from a ChaCha stream seeded by `seed`, in a fixed order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let p = c.pose_dim();
        let encoder = Encoder {
            motion_in: Linear::new(&mut store, &mut rng, "enc.motion_in", p, c.hidden),
            cond_in: Linear::new(&mut store, &mut rng, "enc.cond_in", c.cond_dim, c.hidden),
            blocks: blocks(&mut store, &mut rng, "enc", c),
            to_latent: Linear::new(&mut store, &mut rng, "enc.to_latent", c.hidden, c.channels),
        };
        let prior = Prior {
            cond_in: Linear::new(&mut store, &mut rng, "prior.cond_in", c.cond_dim, c.hidden),
            blocks: blocks(&mut store, &mut rng, "prior", c),
            to_latent: Linear::new(&mut store, &mut rng, "prior.to_latent", c.hidden, c.channels),
        };
        let decoder = Decoder {
            curves_in: Linear::new(&mut store, &mut rng, "dec.curves_in", c.channels, c.hidden),
            cond_in: Linear::new(&mut store, &mut rng, "dec.cond_in", c.cond_dim, c.hidden),
            blocks: blocks(&mut store, &mut rng, "dec", c),
            to_pose: Linear::new(&mut store, &mut rng, "dec.to_pose", c.hidden, p - 3),
        };
        let heads = PhaseHeads::register(&mut store, &mut rng, "phase", c.frames, c.sigma_hidden);
        let k = c.traj_kernel;
        let trajectory = Trajectory {
            convs: vec![
                Linear::from_tensor(&mut store, "traj.conv0", siren_init(&mut rng, k * p, c.traj_hidden, c.omega, true)),
                Linear::from_tensor(
                    &mut store,
                    "traj.conv1",
                    siren_init(&mut rng, k * c.traj_hidden, c.traj_hidden, c.omega, false),
                ),
                Linear::zeroed(&mut store, "traj.conv2", k * c.traj_hidden, 3),
            ],
        };
        Ok(PdvaeModel {
            config,
            store,
            encoder,
            prior,
            decoder,
            heads,
            trajectory,
            prior_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Gradient-tracked parameter leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind(tape)
    }

    /// Constant parameter leaves for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind_frozen(tape)
    }

    pub fn prior_calls(&self) -> u64 {
        self.prior_calls.load(Ordering::Relaxed)
    }

    pub fn reset_prior_calls(&self) {
        self.prior_calls.store(0, Ordering::Relaxed);
    }

    fn positional<'t>(&self, tape: &'t Tape, frames: usize) -> Var<'t> {
        tape.constant(Tape::positional_encoding(frames, self.config.hidden))
    }

    fn embed_cond<'t>(&self, bound: &Bound<'t>, layer: &Linear, cond: Var<'t>) -> Result<Var<'t>> {
        let t = cond.shape()[0];
        layer.forward(bound, cond)?.add(self.positional(cond.tape(), t))
    }

    /// `[T, h]` hidden states to latent curves `[D, T]` and their phase distribution.
    fn to_latent<'t>(&self, bound: &Bound<'t>, layer: &Linear, h: Var<'t>) -> Result<Latent<'t>> {
        let curves = layer.forward(bound, h)?.transpose()?;
        let (shift, sigma) = self.heads.bind(bound);
        let dist = extract_phase_distribution(curves, &shift, &sigma)?;
        Ok(Latent { curves, dist })
    }

    /// Posterior from a motion `[T, P]` and its conditioning `[T, d_a]`.
    pub fn encode<'t>(&self, bound: &Bound<'t>, motion: Var<'t>, cond: Var<'t>) -> Result<Latent<'t>> {
        let c = &self.config;
        check_rows("encoder motion", motion, c.frames, c.pose_dim())?;
        check_rows("encoder conditioning", cond, c.frames, c.cond_dim)?;
        let e = &self.encoder;
        let mut h = e.motion_in.forward(bound, motion)?.add(self.positional(motion.tape(), c.frames))?;
        let kv = self.embed_cond(bound, &e.cond_in, cond)?;
        for b in &e.blocks {
            h = b.forward(bound, h, kv, kv)?;
        }
        self.to_latent(bound, &e.to_latent, h)
    }

    /// Conditional prior. Frames past the model window are padding: they are
    /// excluded from keys and values and their outputs are discarded, which
    /// is exactly a key-padding mask followed by truncation.
    pub fn prior<'t>(&self, bound: &Bound<'t>, cond: Var<'t>) -> Result<Latent<'t>> {
        self.prior_calls.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let shape = cond.shape();
        if shape.len() != 2 || shape[1] != c.cond_dim || shape[0] < c.frames {
            return Err(Error::Shape(format!(
                "prior conditioning must be [>= {}, {}], got {shape:?}",
                c.frames, c.cond_dim
            )));
        }
        let valid = if shape[0] > c.frames { cond.slice_rows(0, c.frames)? } else { cond };
        let p = &self.prior;
        let mut h = self.embed_cond(bound, &p.cond_in, valid)?;
        for b in &p.blocks {
            h = b.forward(bound, h, h, h)?;
        }
        self.to_latent(bound, &p.to_latent, h)
    }

    /// Local motion `[T, P]` (root channels zero) from latent curves `[D, T]`.
    pub fn decode<'t>(&self, bound: &Bound<'t>, curves: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        check_rows("decoder curves", curves, c.channels, c.frames)?;
        check_rows("decoder conditioning", cond, c.frames, c.cond_dim)?;
        let d = &self.decoder;
        // the curves already span time, so no positional encoding here
        let mut h = d.curves_in.forward(bound, curves.transpose()?)?;
        let kv = self.embed_cond(bound, &d.cond_in, cond)?;
        for b in &d.blocks {
            h = b.forward(bound, h, kv, kv)?;
        }
        let local = d.to_pose.forward(bound, h)?;
        let root = cond.tape().constant(Tensor::zeros(&[c.frames, 3]));
        concat_cols(&[local, root])
    }

    pub fn decode_sample<'t>(&self, bound: &Bound<'t>, z: &PhaseSample<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        self.decode(bound, reconstruct_curves(z, self.config.frames)?, cond)
    }

    /// Root translations `[T, 3]` from local motion `[T, P]`; frame 0 sits at the origin.
    pub fn predict_trajectory<'t>(&self, bound: &Bound<'t>, local: Var<'t>) -> Result<Var<'t>> {
        let shape = local.shape();
        if shape.len() != 2 || shape[1] != self.config.pose_dim() {
            return Err(Error::Shape(format!(
                "trajectory input must be [T, {}], got {shape:?}",
                self.config.pose_dim()
            )));
        }
        let frames = shape[0];
        let mut x = local;
        let last = self.trajectory.convs.len() - 1;
        for (i, conv) in self.trajectory.convs.iter().enumerate() {
            let taps = (0..self.config.traj_kernel).map(|k| x.shift_rows(k)).collect::<Result<Vec<_>>>()?;
            let y = conv.forward(bound, concat_cols(&taps)?)?;
            x = if i == last { y } else { siren_activation(y, self.config.omega)? };
        }
        // root[t] = sum of deltas 1..=t
        let mut m = vec![0.0; frames * frames];
        for t in 0..frames {
            for s in 1..=t {
                m[t * frames + s] = 1.0;
            }
        }
        local.tape().constant(Tensor::new(&[frames, frames], m)?).matmul(x)
    }

    /// Local motion with its root channels replaced by `trajectory`.
    pub fn compose<'t>(&self, local: Var<'t>, trajectory: Var<'t>) -> Result<Var<'t>> {
        let p = self.config.pose_dim();
        concat_cols(&[local.slice_cols(0, p - 3)?, trajectory])
    }

    /// Decoder plus trajectory predictor.
    pub fn synthesize<'t>(&self, bound: &Bound<'t>, curves: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let local = self.decode(bound, curves, cond)?;
        let traj = self.predict_trajectory(bound, local)?;
        self.compose(local, traj)
    }

    /// Replaces every parameter value (shapes must match exactly).
    pub fn load_params(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, tensor) in values {
            let id = self
                .store
                .lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            let expected = self.store.value(id).shape().to_vec();
            if tensor.shape() != expected.as_slice() {
                return Err(Error::ParamShape {
                    name,
                    expected,
                    found: tensor.shape().to_vec(),
                });
            }
            *self.store.value_mut(id) = tensor;
        }
        Ok(())
    }
}
