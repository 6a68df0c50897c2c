//! Joint hierarchies and forward kinematics.
//!
//! Coordinates are Z-up, metres. Offsets are expressed in the parent's
//! rest frame.

use serde::{Deserialize, Serialize};

use super::rotation::{add, mat_mul, mat_vec, Mat3, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkeletonKind {
    /// 24-joint SMPL body topology.
    Smpl24,
    /// 8-joint reduced body for fast runs.
    Toy8,
    /// Root plus one child, for gradient checks.
    Chain2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    feet: (usize, usize),
}

const SMPL_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

const SMPL_PARENTS: [i32; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

const SMPL_OFFSETS: [Vec3; 24] = [
    [0.0, 0.0, 0.0],
    [0.07, 0.0, -0.09],
    [-0.07, 0.0, -0.09],
    [0.0, -0.02, 0.11],
    [0.04, 0.0, -0.38],
    [-0.04, 0.0, -0.38],
    [0.0, 0.01, 0.14],
    [0.0, -0.02, -0.40],
    [0.0, -0.02, -0.40],
    [0.0, 0.0, 0.06],
    [0.0, 0.12, -0.06],
    [0.0, 0.12, -0.06],
    [0.0, -0.01, 0.21],
    [0.08, 0.0, 0.11],
    [-0.08, 0.0, 0.11],
    [0.0, 0.05, 0.09],
    [0.12, 0.0, 0.03],
    [-0.12, 0.0, 0.03],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0],
    [-0.08, 0.0, 0.0],
];

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        feet: (usize, usize),
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 || names.len() != n || offsets.len() != n {
            return Err(Error::Invalid("skeleton arrays must be non-empty and equal length".into()));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 || parents[0].is_some() {
            return Err(Error::Invalid("skeleton needs exactly one root at index 0".into()));
        }
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= j {
                    return Err(Error::Invalid(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite rest offset".into()));
        }
        if feet.0 >= n || feet.1 >= n {
            return Err(Error::Invalid("foot joint out of range".into()));
        }
        Ok(Skeleton {
            names,
            parents,
            offsets,
            feet,
        })
    }

    pub fn smpl24() -> Self {
        Self::new(
            SMPL_NAMES.iter().map(|s| s.to_string()).collect(),
            SMPL_PARENTS
                .iter()
                .map(|&p| (p >= 0).then_some(p as usize))
                .collect(),
            SMPL_OFFSETS.to_vec(),
            (10, 11),
        )
        .expect("valid SMPL table")
    }

    pub fn toy8() -> Self {
        let names = [
            "pelvis", "spine", "head", "left_hip", "left_foot", "right_hip", "right_foot", "arm",
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![None, Some(0), Some(1), Some(0), Some(3), Some(0), Some(5), Some(1)],
            vec![
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 0.3],
                [0.0, 0.0, 0.3],
                [0.1, 0.0, -0.1],
                [0.0, 0.0, -0.8],
                [-0.1, 0.0, -0.1],
                [0.0, 0.0, -0.8],
                [0.5, 0.0, 0.2],
            ],
            (4, 6),
        )
        .expect("valid toy table")
    }

    pub fn chain2() -> Self {
        Self::new(
            vec!["root".into(), "tip".into()],
            vec![None, Some(0)],
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            (1, 1),
        )
        .expect("valid chain")
    }

    pub fn from_kind(kind: SkeletonKind) -> Self {
        match kind {
            SkeletonKind::Smpl24 => Self::smpl24(),
            SkeletonKind::Toy8 => Self::toy8(),
            SkeletonKind::Chain2 => Self::chain2(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Length of one pose vector: 6D rotations, positions, velocities, root.
    pub fn pose_dim(&self) -> usize {
        12 * self.joint_count() + 3
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> Vec3 {
        self.offsets[j]
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn feet(&self) -> (usize, usize) {
        self.feet
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.joint_count()).filter(move |&c| self.parents[c] == Some(j))
    }

    /// Global joint positions for local joint rotations and a root translation.
    pub fn forward_kinematics(&self, rotations: &[Mat3], root: Vec3) -> Result<Vec<Vec3>> {
        let n = self.joint_count();
        if rotations.len() != n {
            return Err(Error::Shape(format!(
                "{} rotations for {n} joints",
                rotations.len()
            )));
        }
        let mut global: Vec<Mat3> = Vec::with_capacity(n);
        let mut pos: Vec<Vec3> = Vec::with_capacity(n);
        for j in 0..n {
            match self.parents[j] {
                None => {
                    global.push(rotations[j]);
                    pos.push(root);
                }
                Some(p) => {
                    let g = mat_mul(&global[p], &rotations[j]);
                    pos.push(add(pos[p], mat_vec(&global[p], self.offsets[j])));
                    global.push(g);
                }
            }
        }
        Ok(pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::{axis_angle_to_matrix, IDENTITY};

    fn close(a: Vec3, b: Vec3) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < 1e-12)
    }

    #[test]
    fn smpl_topology() {
        let s = Skeleton::smpl24();
        assert_eq!(s.joint_count(), 24);
        assert_eq!(s.pose_dim(), 291);
        assert_eq!(Skeleton::chain2().pose_dim(), 27);
    }

    #[test]
    fn rejects_bad_hierarchies() {
        let names = vec!["a".to_string(), "b".to_string()];
        let off = vec![[0.0; 3]; 2];
        assert!(Skeleton::new(names.clone(), vec![None, None], off.clone(), (0, 1)).is_err());
        assert!(Skeleton::new(names.clone(), vec![Some(1), None], off.clone(), (0, 1)).is_err());
        assert!(Skeleton::new(names, vec![None, Some(0)], vec![[f64::NAN; 3]; 2], (0, 1)).is_err());
    }

    #[test]
    fn rest_pose_accumulates_offsets() {
        let s = Skeleton::smpl24();
        let root = [0.5, -1.0, 0.9];
        let pos = s.forward_kinematics(&vec![IDENTITY; 24], root).unwrap();
        for j in 0..24 {
            let mut expect = root;
            let mut k = j;
            while let Some(p) = s.parent(k) {
                expect = add(expect, s.offset(k));
                k = p;
            }
            assert!(close(pos[j], expect), "joint {j}");
        }
    }

    #[test]
    fn two_link_quarter_turn() {
        let s = Skeleton::chain2();
        let rz = axis_angle_to_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let root = [2.0, 3.0, 4.0];
        let pos = s.forward_kinematics(&[rz, IDENTITY], root).unwrap();
        assert!(close(pos[1], [2.0, 4.0, 4.0]));
    }

    #[test]
    fn translation_and_rotation_equivariance() {
        let s = Skeleton::toy8();
        let rots: Vec<Mat3> = (0..8)
            .map(|j| axis_angle_to_matrix([0.1 * j as f64, -0.2, 0.05 * j as f64]))
            .collect();
        let base = s.forward_kinematics(&rots, [0.0; 3]).unwrap();
        let t = [1.0, -2.0, 0.5];
        let shifted = s.forward_kinematics(&rots, t).unwrap();
        for j in 0..8 {
            assert!(close(shifted[j], add(base[j], t)));
        }
        let g = axis_angle_to_matrix([0.3, 0.7, -0.4]);
        let mut turned = rots.clone();
        turned[0] = mat_mul(&g, &rots[0]);
        let rotated = s.forward_kinematics(&turned, [0.0; 3]).unwrap();
        for j in 0..8 {
            assert!(close(rotated[j], mat_vec(&g, base[j])));
        }
    }
}
