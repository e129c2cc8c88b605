//! Simplified differentiable capsule body: 21-joint kinematic tree, rigid
//! capsule skinning, shape modulation, markers, and an exact union SDF.

mod kinematics;
mod motion;
mod sdf;
mod template;

pub use kinematics::{
    canonical_mesh, fk_values, forward_kinematics, marker_positions, marker_values,
    matrix_to_rot6d, rot6d_to_matrix, rot6d_values, skin_mesh, FkOut, FramePose,
};
pub use motion::{ActionId, MotionSeq, ACTIONS};
pub use sdf::{body_sdf, body_sdf_value, bone_segments, capsule_sdf, segment_param, union_sdf_min};
pub use template::{
    capsule_sample_pattern, default_template, orthonormal_frame, Joint, SkeletonTemplate,
    FRAME_PARAMS, JOINTS, SHAPE_DIM,
};
