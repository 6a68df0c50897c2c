//! Pose vectors, motion sequences, conditioning tracks and dancer groups.
//!
//! A pose vector for `J` joints has `12J + 3` entries laid out as
//! `[6D rotations (6J) | root-relative positions (3J) | velocities of those
//! positions (3J) | root translation (3)]`. Positions are expressed with the
//! root translation removed so they depend only on the body pose; the
//! global placement lives entirely in the last three channels.

use super::rotation::{add, matrix_to_rot6d, rot6d_to_matrix, sub, Mat3, Vec3};
use super::skeleton::Skeleton;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseParts {
    pub rotations: Vec<[f64; 6]>,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub root: Vec3,
}

impl PoseParts {
    pub fn zeros(joints: usize) -> Self {
        PoseParts {
            rotations: vec![[0.0; 6]; joints],
            positions: vec![[0.0; 3]; joints],
            velocities: vec![[0.0; 3]; joints],
            root: [0.0; 3],
        }
    }
}

pub fn pose_dim(joints: usize) -> usize {
    12 * joints + 3
}

pub fn assemble_pose_vector(parts: &PoseParts) -> Result<Vec<f64>> {
    let j = parts.rotations.len();
    if parts.positions.len() != j || parts.velocities.len() != j {
        return Err(Error::Shape(format!(
            "pose parts disagree on joint count: {} rotations, {} positions, {} velocities",
            j,
            parts.positions.len(),
            parts.velocities.len()
        )));
    }
    let mut v = Vec::with_capacity(pose_dim(j));
    v.extend(parts.rotations.iter().flatten());
    v.extend(parts.positions.iter().flatten());
    v.extend(parts.velocities.iter().flatten());
    v.extend(parts.root);
    Ok(v)
}

pub fn split_pose_vector(v: &[f64], joints: usize) -> Result<PoseParts> {
    if v.len() != pose_dim(joints) {
        return Err(Error::Shape(format!(
            "pose vector of length {} for {joints} joints (expected {})",
            v.len(),
            pose_dim(joints)
        )));
    }
    let (rot, rest) = v.split_at(6 * joints);
    let (pos, rest) = rest.split_at(3 * joints);
    let (vel, root) = rest.split_at(3 * joints);
    let vec3 = |c: &[f64]| [c[0], c[1], c[2]];
    Ok(PoseParts {
        rotations: rot
            .chunks(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect(),
        positions: pos.chunks(3).map(vec3).collect(),
        velocities: vel.chunks(3).map(vec3).collect(),
        root: vec3(root),
    })
}

/// Per-frame velocities in units per frame: central differences inside,
/// one-sided differences at the two ends.
pub fn compute_velocities(positions: &[Vec<Vec3>]) -> Result<Vec<Vec<Vec3>>> {
    let t = positions.len();
    if t < 2 {
        return Err(Error::Invalid(format!(
            "velocities need at least 2 frames, got {t}"
        )));
    }
    let joints = positions[0].len();
    let mut out = vec![vec![[0.0; 3]; joints]; t];
    for (f, frame) in out.iter_mut().enumerate() {
        let (a, b, h) = if f == 0 {
            (1, 0, 1.0)
        } else if f == t - 1 {
            (t - 1, t - 2, 1.0)
        } else {
            (f + 1, f - 1, 2.0)
        };
        for (j, v) in frame.iter_mut().enumerate() {
            let d = sub(positions[a][j], positions[b][j]);
            *v = [d[0] / h, d[1] / h, d[2] / h];
        }
    }
    Ok(out)
}

/// A dancer's motion: `frames` pose vectors for a `joints`-joint skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    joints: usize,
    frames: usize,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(joints: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * pose_dim(joints) {
            return Err(Error::Shape(format!(
                "{} values for {frames} frames of {joints} joints",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("motion contains non-finite values".into()));
        }
        Ok(MotionSequence {
            joints,
            frames,
            data,
        })
    }

    /// Builds the full pose representation from per-frame local rotations
    /// and root translations.
    pub fn from_rotations(skeleton: &Skeleton, rotations: &[Vec<Mat3>], roots: &[Vec3]) -> Result<Self> {
        let frames = rotations.len();
        if roots.len() != frames {
            return Err(Error::Shape("one root translation per frame required".into()));
        }
        let joints = skeleton.joint_count();
        let local: Vec<Vec<Vec3>> = rotations
            .iter()
            .map(|r| skeleton.forward_kinematics(r, [0.0; 3]))
            .collect::<Result<_>>()?;
        let velocities = compute_velocities(&local)?;
        let mut data = Vec::with_capacity(frames * pose_dim(joints));
        for f in 0..frames {
            let parts = PoseParts {
                rotations: rotations[f].iter().map(matrix_to_rot6d).collect(),
                positions: local[f].clone(),
                velocities: velocities[f].clone(),
                root: roots[f],
            };
            data.extend(assemble_pose_vector(&parts)?);
        }
        Self::new(joints, frames, data)
    }

    pub fn from_tensor(joints: usize, t: &Tensor) -> Result<Self> {
        let (frames, width) = t.dims2()?;
        if width != pose_dim(joints) {
            return Err(Error::Shape(format!(
                "tensor width {width}, expected pose dim {}",
                pose_dim(joints)
            )));
        }
        Self::new(joints, frames, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.pose_dim()], self.data.clone()).expect("consistent shape")
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joints)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pose(&self, t: usize) -> &[f64] {
        let p = self.pose_dim();
        &self.data[t * p..(t + 1) * p]
    }

    pub fn parts(&self, t: usize) -> PoseParts {
        split_pose_vector(self.pose(t), self.joints).expect("consistent layout")
    }

    fn vec3_at(&self, t: usize, offset: usize) -> Vec3 {
        let p = self.pose(t);
        [p[offset], p[offset + 1], p[offset + 2]]
    }

    pub fn root(&self, t: usize) -> Vec3 {
        self.vec3_at(t, 12 * self.joints)
    }

    pub fn local_position(&self, t: usize, j: usize) -> Vec3 {
        self.vec3_at(t, 6 * self.joints + 3 * j)
    }

    pub fn velocity(&self, t: usize, j: usize) -> Vec3 {
        self.vec3_at(t, 9 * self.joints + 3 * j)
    }

    pub fn rot6d(&self, t: usize, j: usize) -> [f64; 6] {
        let p = self.pose(t);
        let o = 6 * j;
        [p[o], p[o + 1], p[o + 2], p[o + 3], p[o + 4], p[o + 5]]
    }

    pub fn rotation(&self, t: usize, j: usize) -> Result<Mat3> {
        rot6d_to_matrix(&self.rot6d(t, j))
    }

    pub fn root_trajectory(&self) -> Vec<Vec3> {
        (0..self.frames).map(|t| self.root(t)).collect()
    }

    /// Joint positions in the world frame (root-relative positions plus root).
    pub fn global_positions(&self) -> Vec<Vec<Vec3>> {
        (0..self.frames)
            .map(|t| {
                let r = self.root(t);
                (0..self.joints)
                    .map(|j| add(self.local_position(t, j), r))
                    .collect()
            })
            .collect()
    }

    pub fn global_velocities(&self) -> Result<Vec<Vec<Vec3>>> {
        compute_velocities(&self.global_positions())
    }

    /// Copy with the root translation replaced by `root[t] - root[0]`.
    pub fn rebased(&self) -> Self {
        let origin = self.root(0);
        self.with_root_shift(sub([0.0; 3], origin))
    }

    /// Copy with `shift` added to every root translation.
    pub fn with_root_shift(&self, shift: Vec3) -> Self {
        let mut out = self.clone();
        let p = self.pose_dim();
        let o = 12 * self.joints;
        for t in 0..self.frames {
            for k in 0..3 {
                out.data[t * p + o + k] += shift[k];
            }
        }
        out
    }

    /// Copy with the root translation channels overwritten.
    pub fn with_roots(&self, roots: &[Vec3]) -> Result<Self> {
        if roots.len() != self.frames {
            return Err(Error::Shape("one root per frame required".into()));
        }
        let mut out = self.clone();
        let p = self.pose_dim();
        let o = 12 * self.joints;
        for (t, r) in roots.iter().enumerate() {
            out.data[t * p + o..t * p + o + 3].copy_from_slice(r);
        }
        Ok(out)
    }

    /// Mean joint speed per frame from world-frame velocities.
    pub fn mean_joint_speed(&self) -> Result<Vec<f64>> {
        let v = self.global_velocities()?;
        Ok(v.iter()
            .map(|frame| {
                frame.iter().map(|u| super::rotation::norm(*u)).sum::<f64>() / self.joints as f64
            })
            .collect())
    }
}

/// Per-frame conditioning matrix (`frames x dim`) with its beat frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningFeatures {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    beats: Vec<usize>,
}

impl ConditioningFeatures {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, beats: Vec<usize>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} conditioning values for {frames} x {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("conditioning contains non-finite values".into()));
        }
        if beats.windows(2).any(|w| w[0] >= w[1]) || beats.last().is_some_and(|&b| b >= frames) {
            return Err(Error::Invalid(
                "beat frames must be strictly increasing and inside the window".into(),
            ));
        }
        Ok(ConditioningFeatures {
            frames,
            dim,
            data,
            beats,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn beats(&self) -> &[usize] {
        &self.beats
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.dim], self.data.clone()).expect("consistent shape")
    }

    /// Copy extended with `extra` zero frames (used to exercise masking).
    pub fn padded(&self, extra: usize) -> Self {
        let mut data = self.data.clone();
        data.extend(std::iter::repeat_n(0.0, extra * self.dim));
        ConditioningFeatures {
            frames: self.frames + extra,
            dim: self.dim,
            data,
            beats: self.beats.clone(),
        }
    }
}

/// Dancers that share one conditioning track.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group_id: usize,
    pub dancers: Vec<MotionSequence>,
    pub conditioning: ConditioningFeatures,
}

impl GroupSample {
    pub fn new(group_id: usize, dancers: Vec<MotionSequence>, conditioning: ConditioningFeatures) -> Result<Self> {
        let first = dancers
            .first()
            .ok_or_else(|| Error::Invalid("a group needs at least one dancer".into()))?;
        if dancers
            .iter()
            .any(|d| d.frames() != first.frames() || d.joints() != first.joints())
        {
            return Err(Error::Invalid("dancers in a group must share frame and joint counts".into()));
        }
        if conditioning.frames() != first.frames() {
            return Err(Error::Invalid(format!(
                "conditioning has {} frames, dancers have {}",
                conditioning.frames(),
                first.frames()
            )));
        }
        Ok(GroupSample {
            group_id,
            dancers,
            conditioning,
        })
    }

    pub fn dancer_count(&self) -> usize {
        self.dancers.len()
    }

    pub fn frames(&self) -> usize {
        self.conditioning.frames()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::{axis_angle_to_matrix, IDENTITY};
    use proptest::prelude::*;

    #[test]
    fn zero_pose_and_lengths() {
        assert_eq!(assemble_pose_vector(&PoseParts::zeros(24)).unwrap(), vec![0.0; 291]);
        assert_eq!(assemble_pose_vector(&PoseParts::zeros(2)).unwrap().len(), 27);
        assert!(split_pose_vector(&[0.0; 21], 2).is_err());
    }

    proptest! {
        #[test]
        fn split_inverts_assemble(v in prop::collection::vec(-10.0f64..10.0, 27)) {
            let parts = split_pose_vector(&v, 2).unwrap();
            let back = assemble_pose_vector(&parts).unwrap();
            prop_assert!(back.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn velocities_static_and_linear() {
        let stat = vec![vec![[1.0, 2.0, 3.0]]; 5];
        assert!(compute_velocities(&stat).unwrap().iter().flatten().all(|v| *v == [0.0; 3]));
        let lin: Vec<Vec<Vec3>> = (0..6).map(|t| vec![[0.5 * t as f64, -0.25 * t as f64, 0.0]]).collect();
        for v in compute_velocities(&lin).unwrap() {
            assert!((v[0][0] - 0.5).abs() < 1e-15 && (v[0][1] + 0.25).abs() < 1e-15);
        }
        assert!(compute_velocities(&lin[..1]).is_err());
    }

    #[test]
    fn central_differences_are_second_order() {
        // p(t) = (h t)^3 sampled with step h; interior error is h^2 * 3 t h... scaled
        let err_at = |h: f64| {
            let pos: Vec<Vec<Vec3>> = (0..5).map(|k| vec![[(h * k as f64).powi(3), 0.0, 0.0]]).collect();
            let v = compute_velocities(&pos).unwrap();
            // per-frame velocity divided by h approximates dp/dt = 3 (h k)^2
            let est = v[2][0][0] / h;
            (est - 3.0 * (2.0 * h).powi(2)).abs()
        };
        let ratio = err_at(0.1) / err_at(0.05);
        assert!((ratio - 4.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn from_rotations_keeps_velocity_invariant() {
        let s = Skeleton::toy8();
        let rots: Vec<Vec<Mat3>> = (0..10)
            .map(|t| (0..8).map(|j| axis_angle_to_matrix([0.1 * t as f64, 0.02 * j as f64, 0.0])).collect())
            .collect();
        let roots: Vec<Vec3> = (0..10).map(|t| [t as f64, 0.0, 1.0]).collect();
        let m = MotionSequence::from_rotations(&s, &rots, &roots).unwrap();
        let local: Vec<Vec<Vec3>> = (0..10).map(|t| (0..8).map(|j| m.local_position(t, j)).collect()).collect();
        let v = compute_velocities(&local).unwrap();
        for t in 0..10 {
            for j in 0..8 {
                let d = sub(v[t][j], m.velocity(t, j));
                assert!(d.iter().all(|x| x.abs() < 1e-9));
            }
        }
        assert_eq!(m.root(3), [3.0, 0.0, 1.0]);
        assert_eq!(m.rebased().root(3), [3.0, 0.0, 0.0]);
        let r = m.rotation(0, 0).unwrap();
        assert!(crate::motion::rotation::max_abs_diff(&r, &IDENTITY) < 1e-12);
    }

    #[test]
    fn conditioning_validation() {
        assert!(ConditioningFeatures::new(4, 1, vec![0.0; 4], vec![0, 2]).is_ok());
        assert!(ConditioningFeatures::new(4, 1, vec![0.0; 4], vec![2, 2]).is_err());
        assert!(ConditioningFeatures::new(4, 1, vec![0.0; 4], vec![4]).is_err());
        assert!(ConditioningFeatures::new(4, 1, vec![0.0; 3], vec![]).is_err());
    }
}
