//! Synthetic group choreography.
//!
//! Each group draws a style and a tempo. The style fixes a set of per-joint
//! sinusoid recipes (harmonic, amplitude, phase relative to the beat grid);
//! the group jitters those amplitudes and places its first beat at a random
//! frame. Dancers copy the group choreography with per-joint amplitude
//! jitter and their own spot in the formation. No dancer gets a phase or
//! tempo change, so dancers of one group stay temporally aligned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rotation::{axis_angle_to_matrix, Mat3, Vec3};
use super::sequence::{ConditioningFeatures, GroupSample, MotionSequence};
use super::skeleton::{Skeleton, SkeletonKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub groups: usize,
    pub dancers: usize,
    pub frames: usize,
    pub fps: f64,
    pub tempo_min: f64,
    pub tempo_max: f64,
    pub styles: usize,
    pub skeleton: SkeletonKind,
    /// Distance between neighbouring formation slots, metres.
    pub spacing: f64,
    /// Largest joint-rotation sinusoid amplitude, radians.
    pub max_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            groups: 4,
            dancers: 3,
            frames: 64,
            fps: 30.0,
            tempo_min: 90.0,
            tempo_max: 150.0,
            styles: 4,
            skeleton: SkeletonKind::Smpl24,
            spacing: 1.5,
            max_amplitude: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Invalid("synth: groups must be positive".into()));
        }
        if self.dancers == 0 {
            return Err(Error::Invalid("synth: dancers must be positive".into()));
        }
        if self.frames < 8 {
            return Err(Error::Invalid(format!(
                "synth: frames must be at least 8, got {}",
                self.frames
            )));
        }
        if self.styles == 0 {
            return Err(Error::Invalid("synth: styles must be positive".into()));
        }
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.fps) || !finite_pos(self.tempo_min) || !(self.tempo_max >= self.tempo_min) {
            return Err(Error::Invalid("synth: need fps > 0 and 0 < tempo_min <= tempo_max".into()));
        }
        if !self.spacing.is_finite() || self.spacing < 0.0 || !self.max_amplitude.is_finite() || self.max_amplitude < 0.0 {
            return Err(Error::Invalid("synth: spacing and amplitude must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn conditioning_dim(&self) -> usize {
        2 + self.styles
    }
}

/// Centered grid of `n` slots on the ground plane, `spacing` apart.
pub fn formation_offsets(n: usize, spacing: f64) -> Vec<Vec3> {
    if n == 0 {
        return Vec::new();
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let in_row = if r + 1 == rows { n - r * cols } else { cols };
            [
                (c as f64 - (in_row as f64 - 1.0) / 2.0) * spacing,
                (r as f64 - (rows as f64 - 1.0) / 2.0) * spacing,
                0.0,
            ]
        })
        .collect()
}

/// Beat frames for a beat period (frames) and first-beat offset.
pub fn beat_frames(frames: usize, period: f64, first: f64) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut k = 0.0;
    loop {
        let f = (first + k * period).round();
        if f >= frames as f64 {
            break;
        }
        let f = f as usize;
        if out.last() != Some(&f) {
            out.push(f);
        }
        k += 1.0;
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Term {
    harmonic: f64,
    amplitude: f64,
    phase: f64,
}

/// Per-joint, per-axis sinusoid recipes.
type Recipe = Vec<[Vec<Term>; 3]>;

fn style_recipe(seed: u64, style: usize, joints: usize, max_amp: f64) -> Recipe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(1 + style as u64);
    let tau = std::f64::consts::TAU;
    (0..joints)
        .map(|j| {
            // the root carries a gentle turn only; limbs move more than the torso
            let scale = if j == 0 { 0.3 } else { 1.0 };
            std::array::from_fn(|_| {
                let n = rng.random_range(2..=4);
                (0..n)
                    .map(|_| Term {
                        harmonic: rng.random_range(1..=3) as f64,
                        amplitude: scale * max_amp * rng.random_range(0.2..1.0) / n as f64 * 2.0,
                        phase: rng.random_range(0.0..tau),
                    })
                    .collect()
            })
        })
        .collect()
}

/// Root height above the ground so the feet roughly touch it at rest.
fn standing_height(skeleton: &Skeleton) -> f64 {
    let rest = skeleton
        .forward_kinematics(&vec![super::rotation::IDENTITY; skeleton.joint_count()], [0.0; 3])
        .expect("identity pose");
    let (l, r) = skeleton.feet();
    -(rest[l][2].min(rest[r][2])).min(0.0)
}

/// Deterministic group dataset for `seed`.
pub fn synth_group_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<GroupSample>> {
    config.validate()?;
    let skeleton = Skeleton::from_kind(config.skeleton);
    let joints = skeleton.joint_count();
    let recipes: Vec<Recipe> = (0..config.styles)
        .map(|s| style_recipe(seed, s, joints, config.max_amplitude))
        .collect();
    let height = standing_height(&skeleton);
    let tau = std::f64::consts::TAU;
    let t_len = config.frames;

    (0..config.groups)
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1_000 + g as u64);
            let style = rng.random_range(0..config.styles);
            let bpm = if config.tempo_max > config.tempo_min {
                rng.random_range(config.tempo_min..config.tempo_max)
            } else {
                config.tempo_min
            };
            // cycles per frame
            let f_b = bpm / 60.0 / config.fps;
            let period = 1.0 / f_b;
            let first = rng.random_range(0.0..period);
            let beats = beat_frames(t_len, period, first);

            let mut cond = vec![0.0; t_len * config.conditioning_dim()];
            for t in 0..t_len {
                let row = &mut cond[t * config.conditioning_dim()..(t + 1) * config.conditioning_dim()];
                let nearest = beats
                    .iter()
                    .map(|&b| (t as f64 - b as f64).abs())
                    .fold(f64::INFINITY, f64::min);
                row[0] = (-0.5 * nearest * nearest).exp();
                row[1] = bpm / 120.0;
                row[2 + style] = 1.0;
            }
            let conditioning = ConditioningFeatures::new(t_len, config.conditioning_dim(), cond, beats)?;

            let group_gain: Vec<f64> = (0..joints).map(|_| rng.random_range(0.8..1.2)).collect();
            let sway = rng.random_range(0.03..0.08);
            let bounce = rng.random_range(0.01..0.03);
            let sway_phase = rng.random_range(0.0..tau);
            let slots = formation_offsets(config.dancers, config.spacing);

            let dancers = (0..config.dancers)
                .map(|d| {
                    let gain: Vec<f64> = (0..joints).map(|_| rng.random_range(0.9..1.1)).collect();
                    let jitter = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0];
                    let recipe = &recipes[style];
                    let mut rotations: Vec<Vec<Mat3>> = Vec::with_capacity(t_len);
                    let mut roots: Vec<Vec3> = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        // beat-relative time: all dancers share it
                        let phase_t = tau * f_b * (t as f64 - first);
                        rotations.push(
                            (0..joints)
                                .map(|j| {
                                    let rv: Vec3 = std::array::from_fn(|axis| {
                                        recipe[j][axis]
                                            .iter()
                                            .map(|term| {
                                                term.amplitude
                                                    * (term.harmonic * phase_t + term.phase).sin()
                                            })
                                            .sum::<f64>()
                                            * group_gain[j]
                                            * gain[j]
                                    });
                                    axis_angle_to_matrix(rv)
                                })
                                .collect(),
                        );
                        roots.push([
                            slots[d][0] + jitter[0] + sway * (phase_t + sway_phase).sin(),
                            slots[d][1] + jitter[1],
                            height + bounce * (2.0 * phase_t).cos(),
                        ]);
                    }
                    MotionSequence::from_rotations(&skeleton, &rotations, &roots)
                })
                .collect::<Result<Vec<_>>>()?;
            GroupSample::new(g, dancers, conditioning)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            groups: 4,
            dancers: 3,
            frames: 64,
            skeleton: SkeletonKind::Toy8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synth_group_dataset(&small(), 7).unwrap();
        let b = synth_group_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = synth_group_dataset(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_contract() {
        let data = synth_group_dataset(&small(), 1).unwrap();
        assert_eq!(data.len(), 4);
        let seqs: Vec<_> = data.iter().flat_map(|g| &g.dancers).collect();
        assert_eq!(seqs.len(), 12);
        assert!(seqs.iter().all(|s| s.frames() == 64 && s.pose_dim() == 99));
        assert!(data.iter().all(|g| g.conditioning.dim() == 6));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { dancers: 0, ..small() },
            SynthConfig { frames: 7, ..small() },
            SynthConfig { groups: 0, ..small() },
            SynthConfig { tempo_min: 150.0, tempo_max: 90.0, ..small() },
        ] {
            assert!(synth_group_dataset(&cfg, 0).is_err());
        }
    }

    fn xcorr_argmax(a: &[f64], b: &[f64], max_lag: i64) -> i64 {
        let n = a.len() as i64;
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let mut best = (f64::NEG_INFINITY, 0);
        for lag in -max_lag..=max_lag {
            let s: f64 = (0..n)
                .filter(|&t| (0..n).contains(&(t + lag)))
                .map(|t| (a[t as usize] - ma) * (b[(t + lag) as usize] - mb))
                .sum();
            // prefer the smallest |lag| on ties
            if s > best.0 + 1e-12 || ((s - best.0).abs() <= 1e-12 && lag.abs() < i64::abs(best.1)) {
                best = (s, lag);
            }
        }
        best.1
    }

    #[test]
    fn dancers_share_beat_phase() {
        for g in synth_group_dataset(&small(), 3).unwrap() {
            let sway: Vec<Vec<f64>> = g
                .dancers
                .iter()
                .map(|d| d.root_trajectory().iter().map(|r| r[0]).collect())
                .collect();
            for i in 0..sway.len() {
                for j in 0..sway.len() {
                    assert_eq!(xcorr_argmax(&sway[i], &sway[j], 8), 0, "group {}", g.group_id);
                }
            }
        }
    }

    #[test]
    fn velocities_match_positions() {
        let g = &synth_group_dataset(&small(), 5).unwrap()[0];
        let d = &g.dancers[1];
        for t in 1..d.frames() - 1 {
            for j in 0..d.joints() {
                let a = d.local_position(t + 1, j);
                let b = d.local_position(t - 1, j);
                let v = d.velocity(t, j);
                for k in 0..3 {
                    assert!(((a[k] - b[k]) / 2.0 - v[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn formation_is_centered() {
        for n in 1..10 {
            let f = formation_offsets(n, 1.5);
            assert_eq!(f.len(), n);
            for k in 0..2 {
                let lo = f.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let hi = f.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                assert!((lo + hi).abs() < 1e-12, "bounding box centered");
            }
            for i in 0..n {
                for j in 0..i {
                    let d = ((f[i][0] - f[j][0]).powi(2) + (f[i][1] - f[j][1]).powi(2)).sqrt();
                    assert!(d >= 1.5 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn beats_follow_tempo() {
        assert_eq!(beat_frames(64, 20.0, 3.0), vec![3, 23, 43, 63]);
        assert_eq!(beat_frames(10, 12.0, 11.0), Vec::<usize>::new());
    }
}
