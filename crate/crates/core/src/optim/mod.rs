//! Optimizers shared by keyframe alignment, local refinement and merging.

mod adam;
mod joint;

pub use adam::{monotone_step, Adam};
pub use joint::{
    confident_pixels, joint_optimize, mean_loss, optimize_pose_only, optimize_similarity,
    pose_through, Freeze, GroupRates, JointResult, OptimError, OptimSpec, PoseFit, SimFit,
};
