//! Motion serialisation: a line-oriented frame dump and BVH.
//!
//! Frame dump layout, one record per line after a three-line header:
//!
//! ```text
//! pdvae-frame-dump 1
//! joints <J>
//! frames <T>
//! frame <t> root <x y z> quat <w x y z per joint> pos <x y z per joint>
//! ```
//!
//! Positions are world-frame. Floats use Rust's shortest round-trip form,
//! so a re-import is exact.

use std::fmt::Write as _;
use std::str::FromStr;

use super::rotation::{matrix_to_euler_zyx, matrix_to_quaternion, Vec3};
use super::sequence::MotionSequence;
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

pub const FRAME_TIME: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    FrameDump,
    Bvh,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame-dump" => Ok(ExportFormat::FrameDump),
            "bvh" => Ok(ExportFormat::Bvh),
            other => Err(Error::Format(format!(
                "unsupported export format '{other}' (expected frame-dump or bvh)"
            ))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::FrameDump => "txt",
            ExportFormat::Bvh => "bvh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub root: Vec3,
    pub quaternions: Vec<[f64; 4]>,
    pub positions: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDump {
    pub joints: usize,
    pub frames: Vec<FrameRecord>,
}

pub fn export_motion(seq: &MotionSequence, skeleton: &Skeleton, format: ExportFormat) -> Result<Vec<u8>> {
    if seq.frames() == 0 {
        return Err(Error::Invalid("cannot export an empty sequence".into()));
    }
    if seq.joints() != skeleton.joint_count() {
        return Err(Error::Shape(format!(
            "sequence has {} joints, skeleton {}",
            seq.joints(),
            skeleton.joint_count()
        )));
    }
    let text = match format {
        ExportFormat::FrameDump => frame_dump(seq)?,
        ExportFormat::Bvh => bvh(seq, skeleton)?,
    };
    Ok(text.into_bytes())
}

fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        write!(out, " {v}").expect("write to string");
    }
}

fn frame_dump(seq: &MotionSequence) -> Result<String> {
    let mut out = format!("pdvae-frame-dump 1\njoints {}\nframes {}\n", seq.joints(), seq.frames());
    let global = seq.global_positions();
    for t in 0..seq.frames() {
        write!(out, "frame {t} root").expect("write to string");
        push_floats(&mut out, seq.root(t));
        out.push_str(" quat");
        for j in 0..seq.joints() {
            push_floats(&mut out, matrix_to_quaternion(&seq.rotation(t, j)?));
        }
        out.push_str(" pos");
        for p in &global[t] {
            push_floats(&mut out, *p);
        }
        out.push('\n');
    }
    Ok(out)
}

fn expect_kv(line: Option<&str>, key: &str) -> Result<usize> {
    let line = line.ok_or_else(|| Error::Format(format!("missing '{key}' header")))?;
    let mut it = line.split_whitespace();
    match (it.next(), it.next().map(str::parse::<usize>), it.next()) {
        (Some(k), Some(Ok(v)), None) if k == key => Ok(v),
        _ => Err(Error::Format(format!("bad header line '{line}', expected '{key} <n>'"))),
    }
}

fn take_floats<'a>(it: &mut impl Iterator<Item = &'a str>, n: usize, line_no: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            it.next()
                .ok_or_else(|| Error::Format(format!("line {line_no}: record too short")))?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {line_no}: {e}")))
        })
        .collect()
}

fn expect_token<'a>(it: &mut impl Iterator<Item = &'a str>, token: &str, line_no: usize) -> Result<()> {
    match it.next() {
        Some(t) if t == token => Ok(()),
        other => Err(Error::Format(format!("line {line_no}: expected '{token}', found {other:?}"))),
    }
}

pub fn parse_frame_dump(bytes: &[u8]) -> Result<FrameDump> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("pdvae-frame-dump 1") {
        return Err(Error::Format("not a frame dump (bad magic line)".into()));
    }
    let joints = expect_kv(lines.next(), "joints")?;
    let count = expect_kv(lines.next(), "frames")?;
    let mut frames = Vec::with_capacity(count);
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let line_no = k + 4;
        let mut it = line.split_whitespace();
        expect_token(&mut it, "frame", line_no)?;
        let index = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("line {line_no}: bad frame index")))?;
        expect_token(&mut it, "root", line_no)?;
        let r = take_floats(&mut it, 3, line_no)?;
        expect_token(&mut it, "quat", line_no)?;
        let q = take_floats(&mut it, 4 * joints, line_no)?;
        expect_token(&mut it, "pos", line_no)?;
        let p = take_floats(&mut it, 3 * joints, line_no)?;
        if it.next().is_some() {
            return Err(Error::Format(format!("line {line_no}: trailing fields")));
        }
        frames.push(FrameRecord {
            index,
            root: [r[0], r[1], r[2]],
            quaternions: q.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            positions: p.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    if frames.len() != count {
        return Err(Error::Format(format!("header says {count} frames, found {}", frames.len())));
    }
    Ok(FrameDump { joints, frames })
}

/// Joints in depth-first order, as BVH requires.
fn dfs_order(skeleton: &Skeleton) -> Vec<usize> {
    let mut order = Vec::with_capacity(skeleton.joint_count());
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        let mut kids: Vec<usize> = skeleton.children(j).collect();
        kids.reverse();
        stack.extend(kids);
    }
    order
}

fn write_joint(out: &mut String, skeleton: &Skeleton, j: usize, depth: usize) {
    let pad = "  ".repeat(depth);
    let o = skeleton.offset(j);
    if j == 0 {
        writeln!(out, "ROOT {}", skeleton.name(j)).expect("write to string");
    } else {
        writeln!(out, "{pad}JOINT {}", skeleton.name(j)).expect("write to string");
    }
    writeln!(out, "{pad}{{").expect("write to string");
    writeln!(out, "{pad}  OFFSET {} {} {}", o[0], o[1], o[2]).expect("write to string");
    if j == 0 {
        writeln!(out, "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation")
            .expect("write to string");
    } else {
        writeln!(out, "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation").expect("write to string");
    }
    let kids: Vec<usize> = skeleton.children(j).collect();
    if kids.is_empty() {
        writeln!(out, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET 0 0 0\n{pad}  }}").expect("write to string");
    }
    for c in kids {
        write_joint(out, skeleton, c, depth + 1);
    }
    writeln!(out, "{pad}}}").expect("write to string");
}

fn bvh(seq: &MotionSequence, skeleton: &Skeleton) -> Result<String> {
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, skeleton, 0, 0);
    writeln!(out, "MOTION\nFrames: {}\nFrame Time: {FRAME_TIME}", seq.frames()).expect("write to string");
    let order = dfs_order(skeleton);
    for t in 0..seq.frames() {
        let mut row: Vec<f64> = seq.root(t).to_vec();
        for &j in &order {
            let zyx = matrix_to_euler_zyx(&seq.rotation(t, j)?);
            row.extend(zyx.iter().map(|a| a.to_degrees() + 0.0));
        }
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::rotation::{axis_angle_to_matrix, Mat3, IDENTITY};

    fn moving(skeleton: &Skeleton, frames: usize) -> MotionSequence {
        let j = skeleton.joint_count();
        let rots: Vec<Vec<Mat3>> = (0..frames)
            .map(|t| {
                (0..j)
                    .map(|k| axis_angle_to_matrix([0.1 * t as f64, 0.05 * k as f64, -0.2]))
                    .collect()
            })
            .collect();
        let roots: Vec<Vec3> = (0..frames).map(|t| [0.1 * t as f64, 1.0, 0.9]).collect();
        MotionSequence::from_rotations(skeleton, &rots, &roots).unwrap()
    }

    #[test]
    fn frame_dump_round_trip() {
        let s = Skeleton::smpl24();
        let m = moving(&s, 5);
        let dump = parse_frame_dump(&export_motion(&m, &s, ExportFormat::FrameDump).unwrap()).unwrap();
        assert_eq!(dump.joints, 24);
        assert_eq!(dump.frames.len(), 5);
        let g = m.global_positions();
        for (t, rec) in dump.frames.iter().enumerate() {
            assert_eq!(rec.index, t);
            assert_eq!(rec.root, m.root(t));
            for j in 0..24 {
                for k in 0..3 {
                    assert!((rec.positions[j][k] - g[t][j][k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_sequence_and_unknown_tag() {
        let s = Skeleton::chain2();
        let empty = MotionSequence::new(2, 0, vec![]).unwrap();
        assert!(export_motion(&empty, &s, ExportFormat::Bvh).is_err());
        assert!(matches!("fbx".parse::<ExportFormat>(), Err(Error::Format(_))));
        assert_eq!("bvh".parse::<ExportFormat>().unwrap(), ExportFormat::Bvh);
    }

    #[test]
    fn rejects_malformed_dump() {
        assert!(parse_frame_dump(b"hello").is_err());
        assert!(parse_frame_dump(b"pdvae-frame-dump 1\njoints 1\nframes 1\nframe 0 root 1 2\n").is_err());
    }

    #[test]
    fn rest_pose_bvh_motion_is_zero() {
        let s = Skeleton::toy8();
        let m = MotionSequence::from_rotations(&s, &vec![vec![IDENTITY; 8]; 3], &[[0.0; 3]; 3]).unwrap();
        let text = String::from_utf8(export_motion(&m, &s, ExportFormat::Bvh).unwrap()).unwrap();
        let motion = text.split("Frame Time:").nth(1).unwrap();
        let values: Vec<f64> = motion.lines().skip(1).flat_map(|l| l.split_whitespace()).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 3 * (6 + 3 * 7));
        assert!(values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dfs_order_visits_parents_first() {
        let s = Skeleton::smpl24();
        let order = dfs_order(&s);
        assert_eq!(order.len(), 24);
        let pos: Vec<usize> = (0..24).map(|j| order.iter().position(|&o| o == j).unwrap()).collect();
        for j in 1..24 {
            assert!(pos[s.parent(j).unwrap()] < pos[j]);
        }
    }
}
