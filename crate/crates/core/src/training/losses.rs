//! Reconstruction, KL and group-consistency losses, and the total objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{gaussian_kl, Bound, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::motion::GroupSample;
use crate::networks::{latent_noise, mean_latent, sample_latent, Latent, LatentMode, PdvaeModel};
use crate::phase::{phase_distance, phase_manifold, PhaseDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl: 5e-4,
            consistency: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl >= 0.0 && self.consistency >= 0.0 && self.kl.is_finite() && self.consistency.is_finite()) {
            return Err(Error::Invalid("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which dancer pairs of a group enter the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// One random ordered pair per group per step.
    #[default]
    RandomPair,
    /// Every ordered pair `(m, n)`, `m != n`.
    AllPairs,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_consistency: bool,
    pub disable_phase_manifold: bool,
}

impl Ablation {
    pub fn latent_mode(&self) -> LatentMode {
        if self.disable_phase_manifold {
            LatentMode::Direct
        } else {
            LatentMode::Phase
        }
    }
}

/// Per-step loss values; `total = rec + kl_weight * kl + csc_weight * csc`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub rec: f64,
    pub kl: f64,
    pub csc: f64,
    pub total: f64,
}

impl TrainRecord {
    pub fn is_finite(&self) -> bool {
        self.rec.is_finite() && self.kl.is_finite() && self.csc.is_finite() && self.total.is_finite()
    }

    /// One append-only log line.
    pub fn log_line(&self) -> String {
        format!(
            "step={} rec={:e} kl={:e} csc={:e} total={:e}",
            self.step, self.rec, self.kl, self.csc, self.total
        )
    }
}

/// Mean smooth-L1 (transition 1) between two equally shaped tensors.
pub fn loss_reconstruction<'t>(predicted: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction: predicted {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    predicted.sub(target)?.smooth_l1(1.0)?.mean()
}

/// Gaussian KL over amplitude and shift, summed over channels, plus
/// `(mu_q - mu_p)^2 / 2` for the deterministic frequency and offset.
pub fn loss_kl<'t>(q: &PhaseDistribution<'t>, p: &PhaseDistribution<'t>) -> Result<Var<'t>> {
    if q.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "KL between {} and {} channels",
            q.channels(),
            p.channels()
        )));
    }
    let a = gaussian_kl(q.mu_a, q.sigma_a, p.mu_a, p.sigma_a)?;
    let s = gaussian_kl(q.mu_s, q.sigma_s, p.mu_s, p.sigma_s)?;
    let f = q.mu_f.sub(p.mu_f)?.square()?.sum()?;
    let b = q.mu_b.sub(p.mu_b)?.square()?.sum()?;
    a.add(s)?.add(f.add(b)?.scale(0.5)?)
}

/// KL between two latents under `mode`.
///
/// In direct mode each curve sample is Gaussian around the raw curve with a
/// per-channel spread; the per-element KL is summed over channels and
/// averaged over frames.
pub fn latent_kl<'t>(q: &Latent<'t>, p: &Latent<'t>, mode: LatentMode) -> Result<Var<'t>> {
    match mode {
        LatentMode::Phase => loss_kl(&q.dist, &p.dist),
        LatentMode::Direct => {
            let frames = q.curves.shape()[1] as f64;
            gaussian_kl(q.curves, q.dist.sigma_a, p.curves, p.dist.sigma_a)?.scale(1.0 / frames)
        }
    }
}

/// Noise-free point compared by the consistency loss: the manifold point of
/// the distribution means in phase mode, the raw curves scaled by
/// `1/sqrt(T)` in direct mode (so squared distances are per-frame).
pub fn consistency_point<'t>(latent: &Latent<'t>, mode: LatentMode) -> Result<Var<'t>> {
    match mode {
        LatentMode::Phase => phase_manifold(&latent.dist.mean_sample()),
        LatentMode::Direct => {
            let frames = latent.curves.shape()[1] as f64;
            mean_latent(latent, mode)?.scale(1.0 / frames.sqrt())
        }
    }
}

/// Ordered pairs used by [`loss_consistency`].
pub fn select_pairs<R: Rng>(dancers: usize, pairing: Pairing, rng: &mut R) -> Vec<(usize, usize)> {
    if dancers < 2 {
        return Vec::new();
    }
    match pairing {
        Pairing::AllPairs => (0..dancers)
            .flat_map(|m| (0..dancers).filter(move |&n| n != m).map(move |n| (m, n)))
            .collect(),
        Pairing::RandomPair => {
            let m = rng.random_range(0..dancers);
            let mut n = rng.random_range(0..dancers - 1);
            if n >= m {
                n += 1;
            }
            vec![(m, n)]
        }
    }
}

/// Mean over `pairs` of `KL(q_m || q_n) + |P_m - P_n|^2`; zero without pairs.
/// `points[i]` is the consistency point of `posteriors[i]`.
pub fn loss_consistency<'t>(
    tape: &'t Tape,
    posteriors: &[Latent<'t>],
    points: &[Var<'t>],
    pairs: &[(usize, usize)],
    mode: LatentMode,
) -> Result<Var<'t>> {
    if posteriors.len() != points.len() {
        return Err(Error::Shape(format!(
            "{} posteriors but {} consistency points",
            posteriors.len(),
            points.len()
        )));
    }
    if pairs.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let mut acc: Option<Var<'t>> = None;
    for &(m, n) in pairs {
        if m >= points.len() || n >= points.len() {
            return Err(Error::Invalid(format!("pair ({m}, {n}) out of range for {} dancers", points.len())));
        }
        let term = latent_kl(&posteriors[m], &posteriors[n], mode)?.add(phase_distance(points[m], points[n])?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    acc.expect("non-empty pairs").scale(1.0 / pairs.len() as f64)
}

/// Objective for a batch of groups, built on `tape` with parameters `bound`.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub rec: Var<'t>,
    pub kl: Var<'t>,
    pub csc: Var<'t>,
}

impl LossParts<'_> {
    pub fn record(&self, step: usize) -> TrainRecord {
        TrainRecord {
            step,
            rec: self.rec.item(),
            kl: self.kl.item(),
            csc: self.csc.item(),
            total: self.total.item(),
        }
    }
}

/// Reconstruction and KL averaged over every dancer in the batch,
/// consistency averaged over the groups.
pub fn total_loss<'t, R: Rng, P: Rng>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    model: &PdvaeModel,
    batch: &[&GroupSample],
    weights: &LossWeights,
    ablation: &Ablation,
    pairing: Pairing,
    noise_rng: &mut R,
    pair_rng: &mut P,
) -> Result<LossParts<'t>> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mode = ablation.latent_mode();
    let c = model.config();
    let mut rec_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut csc_terms = Vec::new();
    for group in batch {
        let cond = tape.constant(group.conditioning.to_tensor());
        let prior = model.prior(bound, cond)?;
        let mut posteriors = Vec::with_capacity(group.dancers.len());
        for dancer in &group.dancers {
            let target = tape.constant(dancer.rebased().to_tensor());
            let post = model.encode(bound, target, cond)?;
            let noise = latent_noise(noise_rng, mode, c.channels, c.frames);
            let curves = sample_latent(&post, mode, &noise)?;
            let out = model.synthesize(bound, curves, cond)?;
            rec_terms.push(loss_reconstruction(out, target)?);
            kl_terms.push(latent_kl(&post, &prior, mode)?);
            posteriors.push(post);
        }
        if !ablation.disable_consistency {
            let pairs = select_pairs(posteriors.len(), pairing, pair_rng);
            if !pairs.is_empty() {
                let points = posteriors
                    .iter()
                    .map(|p| consistency_point(p, mode))
                    .collect::<Result<Vec<_>>>()?;
                csc_terms.push(loss_consistency(tape, &posteriors, &points, &pairs, mode)?);
            }
        }
    }
    let mean = |terms: &[Var<'t>]| -> Result<Var<'t>> {
        match terms {
            [] => Ok(tape.scalar(0.0)),
            [first, rest @ ..] => {
                let mut acc = *first;
                for t in rest {
                    acc = acc.add(*t)?;
                }
                acc.scale(1.0 / terms.len() as f64)
            }
        }
    };
    let rec = mean(&rec_terms)?;
    let kl = mean(&kl_terms)?;
    let csc = mean(&csc_terms)?;
    let total = rec.add(kl.scale(weights.kl)?)?.add(csc.scale(weights.consistency)?)?;
    Ok(LossParts { total, rec, kl, csc })
}

/// Consistency points of every dancer of `group`, detached from any tape.
pub fn group_embeddings(model: &PdvaeModel, group: &GroupSample, mode: LatentMode) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let cond = tape.constant(group.conditioning.to_tensor());
    group
        .dancers
        .iter()
        .map(|d| {
            let post = model.encode(&bound, tape.constant(d.rebased().to_tensor()), cond)?;
            Ok(consistency_point(&post, mode)?.value().as_ref().clone())
        })
        .collect()
}

/// Mean squared distances between dancers' consistency points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    /// Over pairs of dancers from the same group.
    pub intra: f64,
    /// Over pairs of dancers from different groups.
    pub inter: f64,
}

impl Separation {
    /// `(inter - intra) / inter`: 1 when groups collapse to points, 0 when
    /// group membership is invisible in the latent.
    pub fn relative_gap(&self) -> f64 {
        if self.inter > 0.0 {
            (self.inter - self.intra) / self.inter
        } else {
            0.0
        }
    }
}

/// Intra- versus inter-group spread of the noise-free latent points.
pub fn phase_separation(model: &PdvaeModel, groups: &[GroupSample], mode: LatentMode) -> Result<Separation> {
    if groups.len() < 2 || groups.iter().any(|g| g.dancer_count() < 2) {
        return Err(Error::Invalid("separation needs at least 2 groups of at least 2 dancers".into()));
    }
    let points = groups
        .iter()
        .map(|g| group_embeddings(model, g, mode))
        .collect::<Result<Vec<_>>>()?;
    let d2 = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (gi, a) in points.iter().enumerate() {
        for (i, p) in a.iter().enumerate() {
            for q in &a[i + 1..] {
                intra += d2(p, q);
                n_intra += 1;
            }
            for b in &points[gi + 1..] {
                for q in b {
                    inter += d2(p, q);
                    n_inter += 1;
                }
            }
        }
    }
    Ok(Separation {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}
