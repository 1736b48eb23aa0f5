//! Human-prior domain types: the skinned template, per-frame pose
//! parameters, pose maps and the 3D Gaussians extracted from generator
//! output.

mod gaussian;
mod lbs;
mod pose;
mod pose_map;
mod template;

pub use gaussian::{
    anchor_points, extract_gaussians, Gaussian3D, GaussianMapPair, GAUSSIAN_CHANNELS, CH_COLOR, CH_LOG_SCALE,
    CH_OFFSET, CH_OPACITY, CH_ROTATION,
};
pub use lbs::{axis_angle_to_matrix, blend_point, pose_template, skinning_transforms, JointTransform};
pub use pose::{load_pose_sequence, read_pose_sequence, save_pose_sequence, write_pose_sequence, SmplxPose};
pub use pose_map::{render_pose_maps, PoseMapPair, DEFAULT_POSE_MAP_RESOLUTION};
pub use template::{Bbox, SkinnedTemplate};

pub(crate) use pose::check_uniform_dims as check_dims;
