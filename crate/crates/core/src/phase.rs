//! The variational phase manifold.
//!
//! Latent curves `L` (`D x T`) are summarised per channel by amplitude,
//! frequency, offset and phase shift. Amplitude and shift are Gaussian with
//! learned spread; frequency and offset are deterministic. A sample is
//! turned back into curves `A sin(2 pi (F t - S)) + B`, and into a point on
//! the manifold `(A sin 2 pi S, A cos 2 pi S)` per channel.
//!
//! Every per-channel quantity is a `[D, 1]` column so it broadcasts against
//! `[D, T]` curves. Shifts are in cycles.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{concat_cols, dft_real, reparameterize, Bound, ParamId, ParamStore, Tensor, Var, TAU};
use crate::error::{Error, Result};

/// Lower and upper clamp for predicted log standard deviations.
pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Relative AC-power floor below which a channel counts as flat.
pub const ZERO_POWER_EPS: f64 = 1e-12;

/// Returns `(D, T)` after checking that `curves` is a valid latent block.
pub fn curve_dims(curves: Var<'_>) -> Result<(usize, usize)> {
    let shape = curves.shape();
    let [d, t] = shape[..] else {
        return Err(Error::Shape(format!("latent curves must be [D, T], got {shape:?}")));
    };
    if d == 0 || t < 2 {
        return Err(Error::Shape(format!("latent curves need D >= 1 and T >= 2, got [{d}, {t}]")));
    }
    Ok((d, t))
}

/// Maps curves to the two pre-arctan shift coordinates `(s_y, s_x)`.
pub trait ShiftHead<'t> {
    fn project(&self, curves: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

/// Maps curves to unclamped `(log sigma_A, log sigma_S)`.
pub trait SigmaHead<'t> {
    fn log_sigmas(&self, curves: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

/// Fully connected `T -> 2` layer shared across channels.
pub struct FcShiftHead<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> ShiftHead<'t> for FcShiftHead<'t> {
    fn project(&self, curves: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let out = curves.matmul(self.weight)?.add(self.bias)?;
        Ok((out.slice_cols(0, 1)?, out.slice_cols(1, 1)?))
    }
}

/// Two-layer `T -> h -> 2` tanh MLP shared across channels.
pub struct MlpSigmaHead<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> SigmaHead<'t> for MlpSigmaHead<'t> {
    fn log_sigmas(&self, curves: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = curves.matmul(self.w1)?.add(self.b1)?.tanh()?;
        let out = h.matmul(self.w2)?.add(self.b2)?;
        Ok((out.slice_cols(0, 1)?, out.slice_cols(1, 1)?))
    }
}

/// Parameter ids of one shift head and one sigma head.
#[derive(Debug, Clone, Copy)]
pub struct PhaseHeads {
    shift_w: ParamId,
    shift_b: ParamId,
    sigma_w1: ParamId,
    sigma_b1: ParamId,
    sigma_w2: ParamId,
    sigma_b2: ParamId,
}

impl PhaseHeads {
    /// Initial log-sigma bias: posteriors start narrow.
    pub const INITIAL_LOG_SIGMA: f64 = -3.0;

    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, frames: usize, hidden: usize) -> Self {
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::new(&[rows, cols], data).expect("consistent shape")
        };
        let t_bound = 1.0 / (frames as f64).sqrt();
        let shift_w = uniform(frames, 2, t_bound);
        let sigma_w1 = uniform(frames, hidden, t_bound);
        let sigma_w2 = uniform(hidden, 2, 0.1 / (hidden as f64).sqrt());
        PhaseHeads {
            shift_w: store.add(format!("{prefix}.shift.w"), shift_w),
            shift_b: store.add(format!("{prefix}.shift.b"), Tensor::zeros(&[1, 2])),
            sigma_w1: store.add(format!("{prefix}.sigma.w1"), sigma_w1),
            sigma_b1: store.add(format!("{prefix}.sigma.b1"), Tensor::zeros(&[1, hidden])),
            sigma_w2: store.add(format!("{prefix}.sigma.w2"), sigma_w2),
            sigma_b2: store.add(
                format!("{prefix}.sigma.b2"),
                Tensor::full(&[1, 2], Self::INITIAL_LOG_SIGMA),
            ),
        }
    }

    pub fn bind<'t>(&self, bound: &Bound<'t>) -> (FcShiftHead<'t>, MlpSigmaHead<'t>) {
        (
            FcShiftHead {
                weight: bound.get(self.shift_w),
                bias: bound.get(self.shift_b),
            },
            MlpSigmaHead {
                w1: bound.get(self.sigma_w1),
                b1: bound.get(self.sigma_b1),
                w2: bound.get(self.sigma_w2),
                b2: bound.get(self.sigma_b2),
            },
        )
    }
}

/// Per-channel Gaussian over phase parameters; `[D, 1]` columns.
#[derive(Clone, Copy)]
pub struct PhaseDistribution<'t> {
    pub mu_a: Var<'t>,
    pub mu_f: Var<'t>,
    pub mu_b: Var<'t>,
    pub mu_s: Var<'t>,
    pub sigma_a: Var<'t>,
    pub sigma_s: Var<'t>,
}

/// Plain-value copy of a distribution, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseValues {
    pub mu_a: Vec<f64>,
    pub mu_f: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub sigma_a: Vec<f64>,
    pub sigma_s: Vec<f64>,
}

impl<'t> PhaseDistribution<'t> {
    pub fn channels(&self) -> usize {
        self.mu_a.shape()[0]
    }

    pub fn values(&self) -> PhaseValues {
        let v = |x: Var<'t>| x.value().data().to_vec();
        PhaseValues {
            mu_a: v(self.mu_a),
            mu_f: v(self.mu_f),
            mu_b: v(self.mu_b),
            mu_s: v(self.mu_s),
            sigma_a: v(self.sigma_a),
            sigma_s: v(self.sigma_s),
        }
    }

    /// The sample at zero noise.
    pub fn mean_sample(&self) -> PhaseSample<'t> {
        PhaseSample {
            a: self.mu_a,
            f: self.mu_f,
            b: self.mu_b,
            s: self.mu_s,
        }
    }

    /// Rows `start..start+len` of every parameter.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        Ok(PhaseDistribution {
            mu_a: self.mu_a.slice_rows(start, len)?,
            mu_f: self.mu_f.slice_rows(start, len)?,
            mu_b: self.mu_b.slice_rows(start, len)?,
            mu_s: self.mu_s.slice_rows(start, len)?,
            sigma_a: self.sigma_a.slice_rows(start, len)?,
            sigma_s: self.sigma_s.slice_rows(start, len)?,
        })
    }
}

/// One draw `{A, F, B, S}`; `[D, 1]` columns.
#[derive(Clone, Copy)]
pub struct PhaseSample<'t> {
    pub a: Var<'t>,
    pub f: Var<'t>,
    pub b: Var<'t>,
    pub s: Var<'t>,
}

fn column<'t>(v: Var<'t>, d: usize) -> Result<Var<'t>> {
    v.reshape(&[d, 1])
}

/// Frequency-domain summary of `curves` plus learned shift and spread.
pub fn extract_phase_distribution<'t>(
    curves: Var<'t>,
    shift_head: &dyn ShiftHead<'t>,
    sigma_head: &dyn SigmaHead<'t>,
) -> Result<PhaseDistribution<'t>> {
    let (d, t) = curve_dims(curves)?;
    let tape = curves.tape();
    let coeffs = dft_real(curves)?;
    let k = coeffs.bins() - 1;
    let tf = t as f64;

    let power = coeffs.re.square()?.add(coeffs.im.square()?)?.scale(2.0 / tf)?;
    let ac = power.slice_cols(1, k)?;
    let total = column(ac.sum_lastdim()?, d)?;

    // flat channels: substitute a unit total so nothing divides by zero,
    // then zero the results through the mask
    let eps = ZERO_POWER_EPS * tf;
    let mask_vals: Vec<f64> = total.value().data().iter().map(|&p| if p >= eps { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(&[d, 1], mask_vals.clone())?);
    let fill = tape.constant(Tensor::new(&[d, 1], mask_vals.iter().map(|m| 1.0 - m).collect())?);
    let safe_total = total.mul(mask)?.add(fill)?;

    let mu_a = safe_total.scale(2.0 / tf)?.sqrt()?.mul(mask)?;
    let freqs = tape.constant(Tensor::new(&[1, k], (1..=k).map(|j| j as f64 / tf).collect())?);
    let weighted = column(ac.mul(freqs)?.sum_lastdim()?, d)?;
    let mu_f = weighted.div(safe_total)?.mul(mask)?;
    let mu_b = coeffs.re.slice_cols(0, 1)?.scale(1.0 / tf)?;

    let (s_y, s_x) = shift_head.project(curves)?;
    let mu_s = s_y.atan2(s_x)?.scale(1.0 / TAU)?;

    let (log_sa, log_ss) = sigma_head.log_sigmas(curves)?;
    let sigma_a = log_sa.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)?.exp()?;
    let sigma_s = log_ss.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)?.exp()?;

    for (name, v) in [("shift", mu_s), ("sigma_a", sigma_a), ("sigma_s", sigma_s)] {
        if v.shape() != [d, 1] {
            return Err(Error::Shape(format!("{name} head produced {:?}, expected [{d}, 1]", v.shape())));
        }
    }
    Ok(PhaseDistribution {
        mu_a,
        mu_f,
        mu_b,
        mu_s,
        sigma_a,
        sigma_s,
    })
}

/// Standard-normal noise for `channels` channels: column 0 drives A, column 1 drives S.
pub fn standard_noise<R: Rng>(rng: &mut R, channels: usize) -> Tensor {
    let data = (0..2 * channels).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[channels, 2], data).expect("consistent shape")
}

/// Reparameterised draw; `noise` is `[D, 2]`.
pub fn sample_phase<'t>(dist: &PhaseDistribution<'t>, noise: &Tensor) -> Result<PhaseSample<'t>> {
    let d = dist.channels();
    if noise.shape() != [d, 2] {
        return Err(Error::Shape(format!("phase noise must be [{d}, 2], got {:?}", noise.shape())));
    }
    let (na, ns): (Vec<f64>, Vec<f64>) = noise.data().chunks(2).map(|c| (c[0], c[1])).unzip();
    Ok(PhaseSample {
        a: reparameterize(dist.mu_a, dist.sigma_a, &Tensor::new(&[d, 1], na)?)?,
        f: dist.mu_f,
        b: dist.mu_b,
        s: reparameterize(dist.mu_s, dist.sigma_s, &Tensor::new(&[d, 1], ns)?)?,
    })
}

/// `A sin(2 pi (F t - S)) + B` for `t = 0..T-1`, shape `[D, T]`.
pub fn reconstruct_curves<'t>(z: &PhaseSample<'t>, frames: usize) -> Result<Var<'t>> {
    if frames < 2 {
        return Err(Error::Invalid(format!("reconstruction needs T >= 2, got {frames}")));
    }
    let tape = z.a.tape();
    let times = tape.constant(Tensor::new(&[1, frames], (0..frames).map(|t| t as f64).collect())?);
    let arg = z.f.mul(times)?.sub(z.s)?.scale(TAU)?;
    arg.sin()?.mul(z.a)?.add(z.b)
}

/// `[1, 2D]` point `(A_i sin 2 pi S_i, A_i cos 2 pi S_i)` interleaved per channel.
pub fn phase_manifold<'t>(z: &PhaseSample<'t>) -> Result<Var<'t>> {
    let d = z.a.shape()[0];
    let angle = z.s.scale(TAU)?;
    let pair = concat_cols(&[z.a.mul(angle.sin()?)?, z.a.mul(angle.cos()?)?])?;
    pair.reshape(&[1, 2 * d])
}

/// Squared Euclidean distance between two manifold points.
pub fn phase_distance<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "phase points differ in shape: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    p.sub(q)?.square()?.sum()
}
