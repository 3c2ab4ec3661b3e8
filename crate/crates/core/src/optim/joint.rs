//! Photometric refinement loops: joint Gaussian and pose updates, pose-only
//! fitting, and similarity fitting of a frozen set.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adam::Adam;
use crate::geometry::{exp_so3, CameraIntrinsics, Pose, SimTransform};
use crate::image::{Frame, Image};
use crate::metrics::{photometric_loss, MetricsError};
use crate::render::{render, render_backward, RenderError, RenderOutput};
use crate::splat::GaussianSet;

const MIN_SCALE: f64 = 1e-9;
const OPACITY_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("no frames to optimize against")]
    NoFrames,
    #[error("{0} frames but {1} poses")]
    PoseCount(usize, usize),
    #[error("invalid optimizer settings: {0}")]
    InvalidSpec(&'static str),
    #[error("pose-only fitting needs every Gaussian group frozen")]
    NotFrozen,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Base step per parameter group. The centre step and the translation part
/// of pose steps are multiplied by the set's extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub center: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub pose: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        GroupRates {
            center: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            pose: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Freeze {
    pub center: bool,
    pub color: bool,
    pub opacity: bool,
    pub scale: bool,
    pub pose: bool,
}

impl Freeze {
    pub fn gaussians() -> Self {
        Freeze {
            center: true,
            color: true,
            opacity: true,
            scale: true,
            pose: false,
        }
    }

    fn all_gaussians(&self) -> bool {
        self.center && self.color && self.opacity && self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSpec {
    pub iterations: usize,
    pub seed: u64,
    pub rates: GroupRates,
    pub freeze: Freeze,
    /// Frame whose pose never moves; it pins the gauge of the node.
    pub anchor: Option<u32>,
    /// Confidence threshold of the fixed fitting mask.
    pub beta: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            iterations: 200,
            seed: 0,
            rates: GroupRates::default(),
            freeze: Freeze::default(),
            anchor: None,
            beta: 0.9,
        }
    }
}

impl OptimSpec {
    pub fn pose_only(iterations: usize) -> Self {
        OptimSpec {
            iterations,
            freeze: Freeze::gaussians(),
            ..OptimSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let r = &self.rates;
        if [r.center, r.color, r.opacity, r.scale, r.pose]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(OptimError::InvalidSpec("steps must be positive"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(OptimError::InvalidSpec("beta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JointResult {
    pub set: GaussianSet,
    pub poses: Vec<Pose>,
    /// Loss of the sampled frame at every step, before the update.
    pub losses: Vec<f64>,
}

/// Translation components of a pose step are in scene units, so they scale
/// with the extent like the centre step; rotations are left alone.
fn pose_step(d: &[f64], extent: f64) -> [f64; 6] {
    [d[0] * extent, d[1] * extent, d[2] * extent, d[3], d[4], d[5]]
}

fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders every frame and returns the mean photometric loss.
pub fn mean_loss(
    set: &GaussianSet,
    frames: &[Frame],
    poses: &[Pose],
    k: &CameraIntrinsics,
) -> Result<f64, OptimError> {
    if frames.is_empty() {
        return Err(OptimError::NoFrames);
    }
    let mut total = 0.0;
    for (f, p) in frames.iter().zip(poses) {
        total += photometric_loss(&render(set, p, k).image(), &f.image)?.0;
    }
    Ok(total / frames.len() as f64)
}

/// Stochastic refinement of Gaussians and camera poses. Every step renders
/// one uniformly drawn frame and applies a moment-based update to each
/// unfrozen group. Opacities move in logit space and scales in log space.
pub fn joint_optimize(
    set: &GaussianSet,
    frames: &[Frame],
    poses: &[Pose],
    k: &CameraIntrinsics,
    spec: &OptimSpec,
) -> Result<JointResult, OptimError> {
    if frames.is_empty() {
        return Err(OptimError::NoFrames);
    }
    if frames.len() != poses.len() {
        return Err(OptimError::PoseCount(frames.len(), poses.len()));
    }
    spec.validate()?;
    let mut set = set.clone();
    let mut poses = poses.to_vec();
    let mut losses = Vec::with_capacity(spec.iterations);
    if spec.iterations == 0 {
        return Ok(JointResult { set, poses, losses });
    }
    let n = set.len();
    let fz = spec.freeze;
    let r = spec.rates;
    let extent = set.extent().max(MIN_SCALE);
    let mut a_center = Adam::new(3 * n, r.center * extent);
    let mut a_color = Adam::new(3 * n, r.color);
    let mut a_opacity = Adam::new(n, r.opacity);
    let mut a_scale = Adam::new(n, r.scale);
    let mut a_pose: Vec<Adam> = frames.iter().map(|_| Adam::new(6, r.pose)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buf = vec![0.0; 3 * n];
    let mut grad = vec![0.0; 3 * n];
    for _ in 0..spec.iterations {
        let j = rng.random_range(0..frames.len());
        let fwd = render(&set, &poses[j], k);
        let (loss, g_img) = photometric_loss(&fwd.image(), &frames[j].image)?;
        losses.push(loss);
        let g = render_backward(&set, &poses[j], k, &fwd, &g_img)?;
        if !fz.center {
            for i in 0..n {
                grad[3 * i..3 * i + 3].copy_from_slice(g.center[i].as_slice());
            }
            a_center.step_into(&grad, &mut buf);
            for (i, gs) in set.gaussians.iter_mut().enumerate() {
                gs.center += Vector3::new(buf[3 * i], buf[3 * i + 1], buf[3 * i + 2]);
            }
        }
        if !fz.color {
            for i in 0..n {
                grad[3 * i..3 * i + 3].copy_from_slice(&g.color[i]);
            }
            a_color.step_into(&grad, &mut buf);
            for (i, gs) in set.gaussians.iter_mut().enumerate() {
                for c in 0..3 {
                    gs.color[c] = (gs.color[c] + buf[3 * i + c]).clamp(0.0, 1.0);
                }
            }
        }
        if !fz.opacity {
            for (i, gs) in set.gaussians.iter().enumerate() {
                grad[i] = g.opacity[i] * gs.opacity * (1.0 - gs.opacity);
            }
            a_opacity.step_into(&grad[..n], &mut buf[..n]);
            for (i, gs) in set.gaussians.iter_mut().enumerate() {
                gs.opacity = sigmoid(logit(gs.opacity) + buf[i]);
            }
        }
        if !fz.scale {
            for (i, gs) in set.gaussians.iter().enumerate() {
                grad[i] = g.scale[i] * gs.scale;
            }
            a_scale.step_into(&grad[..n], &mut buf[..n]);
            for (i, gs) in set.gaussians.iter_mut().enumerate() {
                gs.scale = (gs.scale * buf[i].exp()).max(MIN_SCALE);
            }
        }
        if !fz.pose && spec.anchor != Some(frames[j].index) {
            let d = a_pose[j].direction(&g.pose);
            poses[j] = poses[j].retract(&pose_step(&d, extent));
        }
    }
    Ok(JointResult { set, poses, losses })
}

/// Pixels the set reconstructs with confidence above `beta` and a positive
/// depth.
pub fn confident_pixels(out: &RenderOutput, beta: f64) -> Vec<bool> {
    out.confidence
        .iter()
        .zip(&out.depth)
        .map(|(c, d)| *c > beta && *d > 0.0)
        .collect()
}

/// Photometric loss where pixels outside `mask` show the target itself.
fn masked_loss(
    out: &RenderOutput,
    target: &Image,
    mask: &[bool],
) -> Result<(f64, Vec<f64>), MetricsError> {
    let mut blend = target.clone();
    for (p, m) in mask.iter().enumerate() {
        if *m {
            blend.data[3 * p..3 * p + 3].copy_from_slice(&out.color[3 * p..3 * p + 3]);
        }
    }
    let (loss, mut grad) = photometric_loss(&blend, target)?;
    for (p, m) in mask.iter().enumerate() {
        if !*m {
            grad[3 * p..3 * p + 3].fill(0.0);
        }
    }
    Ok((loss, grad))
}

struct View<'a> {
    target: &'a Image,
    mask: Vec<bool>,
}

fn masked_value(
    set: &GaussianSet,
    views: &[View],
    poses: &[Pose],
    k: &CameraIntrinsics,
) -> Result<f64, OptimError> {
    let mut total = 0.0;
    for (v, p) in views.iter().zip(poses) {
        total += masked_loss(&render(set, p, k), v.target, &v.mask)?.0;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct PoseFit {
    pub pose: Pose,
    /// Objective at every iterate, the last entry being the final pose.
    pub losses: Vec<f64>,
}

/// Fits one camera pose to a frozen set. The loss covers only pixels the set
/// reconstructs confidently at `pose_init`; that mask stays fixed so the
/// camera cannot lower the loss by turning away from the scene. Returns the
/// best iterate, never worse than the start.
pub fn optimize_pose_only(
    set: &GaussianSet,
    frame: &Frame,
    pose_init: &Pose,
    k: &CameraIntrinsics,
    spec: &OptimSpec,
) -> Result<PoseFit, OptimError> {
    if !spec.freeze.all_gaussians() {
        return Err(OptimError::NotFrozen);
    }
    spec.validate()?;
    let mask = confident_pixels(&render(set, pose_init, k), spec.beta);
    let mut pose = *pose_init;
    let mut best = (f64::INFINITY, pose);
    let mut losses = Vec::with_capacity(spec.iterations + 1);
    let extent = set.extent().max(MIN_SCALE);
    let mut adam = Adam::new(6, spec.rates.pose);
    for _ in 0..spec.iterations {
        let fwd = render(set, &pose, k);
        let (f, g_img) = masked_loss(&fwd, &frame.image, &mask)?;
        losses.push(f);
        if f < best.0 {
            best = (f, pose);
        }
        let g = render_backward(set, &pose, k, &fwd, &g_img)?;
        let d = adam.direction(&g.pose);
        pose = pose.retract(&pose_step(&d, extent));
    }
    let f = masked_loss(&render(set, &pose, k), &frame.image, &mask)?.0;
    losses.push(f);
    if f < best.0 {
        best = (f, pose);
    }
    Ok(PoseFit { pose: best.1, losses })
}

#[derive(Debug, Clone)]
pub struct SimFit {
    pub transform: SimTransform,
    pub losses: Vec<f64>,
}

/// Parameters `(rho, phi, lambda)` act as `R' = Exp(phi) R`, `t' = t + rho`,
/// `s' = e^lambda s`.
fn perturb(t: &SimTransform, d: &[f64; 7]) -> SimTransform {
    let rot: UnitQuaternion<f64> = exp_so3(&Vector3::new(d[3], d[4], d[5])) * t.pose.rotation();
    SimTransform {
        pose: Pose::new(rot, t.pose.translation() + Vector3::new(d[0], d[1], d[2])),
        scale: t.scale * d[6].exp(),
    }
}

/// Pose of a camera `pose_b` of node B, expressed in node A's frame when
/// `t` maps A into B. The camera frame is divided by the scale, which leaves
/// the image unchanged.
pub fn pose_through(t: &SimTransform, pose_b: &Pose) -> Pose {
    let rb = pose_b.rotation();
    Pose::new(
        rb * t.pose.rotation(),
        (rb * t.pose.translation() + pose_b.translation()) / t.scale,
    )
}

/// Fits the similarity taking the frozen set's frame into the frame of
/// cameras `poses_b`, starting from `t_init`. Each view is masked as in
/// [`optimize_pose_only`].
pub fn optimize_similarity(
    set: &GaussianSet,
    frames: &[Frame],
    poses_b: &[Pose],
    t_init: &SimTransform,
    k: &CameraIntrinsics,
    spec: &OptimSpec,
) -> Result<SimFit, OptimError> {
    if frames.is_empty() {
        return Err(OptimError::NoFrames);
    }
    if frames.len() != poses_b.len() {
        return Err(OptimError::PoseCount(frames.len(), poses_b.len()));
    }
    if !spec.freeze.all_gaussians() {
        return Err(OptimError::NotFrozen);
    }
    spec.validate()?;
    let cams = |t: &SimTransform| -> Vec<Pose> { poses_b.iter().map(|p| pose_through(t, p)).collect() };
    let views: Vec<View> = frames
        .iter()
        .zip(cams(t_init))
        .map(|(f, p)| View {
            target: &f.image,
            mask: confident_pixels(&render(set, &p, k), spec.beta),
        })
        .collect();
    let mut t = *t_init;
    let mut best = (f64::INFINITY, t);
    let mut losses = Vec::with_capacity(spec.iterations + 1);
    let extent = set.extent().max(MIN_SCALE);
    let mut adam = Adam::new(7, spec.rates.pose);
    for _ in 0..spec.iterations {
        let mut f = 0.0;
        let mut grad = [0.0; 7];
        for ((v, q), pb) in views.iter().zip(cams(&t)).zip(poses_b) {
            let fwd = render(set, &q, k);
            let (fv, g_img) = masked_loss(&fwd, v.target, &v.mask)?;
            f += fv;
            let g = render_backward(set, &q, k, &fwd, &g_img)?;
            let g_rho = Vector3::new(g.pose[0], g.pose[1], g.pose[2]);
            let g_phi = Vector3::new(g.pose[3], g.pose[4], g.pose[5]);
            let rt = pb.rotation().inverse();
            let tq = *q.translation();
            let d_rho = rt * g_rho / t.scale;
            let d_phi = rt * (g_phi - tq.cross(&g_rho));
            grad[0] += d_rho.x;
            grad[1] += d_rho.y;
            grad[2] += d_rho.z;
            grad[3] += d_phi.x;
            grad[4] += d_phi.y;
            grad[5] += d_phi.z;
            grad[6] -= tq.dot(&g_rho);
        }
        losses.push(f);
        if f < best.0 {
            best = (f, t);
        }
        let d = adam.direction(&grad);
        t = perturb(&t, &std::array::from_fn(|i| if i < 3 { d[i] * extent } else { d[i] }));
    }
    let f = masked_value(set, &views, &cams(&t), k)?;
    losses.push(f);
    if f < best.0 {
        best = (f, t);
    }
    let t = best.1;
    Ok(SimFit { transform: t, losses })
}
