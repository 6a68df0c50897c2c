//! Skeletons, pose vectors, motion sequences, the synthetic group dataset
//! and motion export.

mod export;
mod rotation;
mod sequence;
mod skeleton;
mod synth;

pub use export::{export_motion, parse_frame_dump, ExportFormat, FrameDump, FrameRecord, FRAME_TIME};
pub use rotation::{
    add, axis_angle_to_matrix, cross, determinant, dot, euler_zyx_to_matrix, mat_mul, mat_vec,
    matrix_to_euler_zyx, matrix_to_quaternion, matrix_to_rot6d, max_abs_diff, norm,
    quaternion_to_matrix, rot6d_to_matrix, scale, sub, transpose, Mat3, Vec3, IDENTITY,
};
pub use sequence::{
    assemble_pose_vector, compute_velocities, pose_dim, split_pose_vector, ConditioningFeatures,
    GroupSample, MotionSequence, PoseParts,
};
pub use skeleton::{Skeleton, SkeletonKind};
pub use synth::{beat_frames, formation_offsets, synth_group_dataset, SynthConfig};
