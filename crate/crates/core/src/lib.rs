//! Pose-free reconstruction of a static scene from a video: fragments are
//! registered with two-view geometric priors, each fragment becomes a set of
//! isotropic Gaussian splats, and the sets are merged pairwise up a binary
//! tree into one scene.

pub mod geometry;
pub mod image;
pub mod prior;
pub mod optim;
pub mod registration;
pub mod splat;
pub mod render;
pub mod metrics;
pub mod hierarchy;
pub mod config;
pub mod pipeline;
