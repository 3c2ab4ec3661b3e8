//! Fragment registration: windowing the video, globally aligning the
//! keyframes through their pairwise pointmaps, then placing every other frame
//! of a fragment relative to its keyframe.

mod align;
mod pnp;

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::prior::PriorBundle;

pub use align::{global_keyframe_alignment, AlignSpec, KeyframeAlignment};
pub use pnp::{p3p, pnp_ransac_pose, refine_pose, PnpResult, RansacSpec};

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("fragment size must be at least 2, got {0}")]
    InvalidFragmentSize(usize),
    #[error("keyframe {0} is not connected to the first keyframe")]
    DisconnectedGraph(u32),
    #[error("prior bundle has no pair ({0}, {1})")]
    MissingPair(u32, u32),
    #[error("fragment {fragment}: only {survivors} keyframe pixels are matched in every pair")]
    EmptyIntersection { fragment: usize, survivors: usize },
    #[error("PnP needs at least 6 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("RANSAC found {inliers} inliers out of {total}")]
    NoConsensus { inliers: usize, total: usize },
    #[error("frame point {0} has zero norm")]
    ZeroNormPoint(usize),
    #[error("scale estimation needs equal, non-empty point lists ({0} vs {1})")]
    ScaleInput(usize, usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// A window of consecutive frames anchored at its first frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    /// 1-based position among fragments.
    pub index: usize,
    pub frames: Vec<u32>,
}

impl Fragment {
    pub fn keyframe(&self) -> u32 {
        self.frames[0]
    }

    pub fn first(&self) -> u32 {
        self.frames[0]
    }

    pub fn last(&self) -> u32 {
        *self.frames.last().expect("fragments are never empty")
    }
}

/// Splits frames `1..=n` into windows of `k`. A trailing window of two or
/// more frames is kept; a single trailing frame joins the previous window.
pub fn partition(n: usize, k: usize) -> Result<Vec<Fragment>, RegistrationError> {
    if n < 2 {
        return Err(RegistrationError::TooFewFrames(n));
    }
    if k < 2 {
        return Err(RegistrationError::InvalidFragmentSize(k));
    }
    let mut out: Vec<Fragment> = Vec::new();
    let mut start = 1;
    while start <= n {
        let end = (start + k - 1).min(n);
        if end == start && !out.is_empty() {
            out.last_mut().unwrap().frames.push(start as u32);
        } else {
            out.push(Fragment {
                index: out.len() + 1,
                frames: (start as u32..=end as u32).collect(),
            });
        }
        start = end + 1;
    }
    Ok(out)
}

/// Edges of the pruned keyframe graph over keyframe ordinals `1..=m`: each
/// keyframe links to its two predecessors and two successors. Sorted, so the
/// first edge is always `(1, 2)` when `m >= 2`.
pub fn build_keyframe_graph(m: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 1..=m {
        for j in i + 1..=(i + 2).min(m) {
            edges.push((i, j));
        }
    }
    edges
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframeGraph {
    /// Frame index of each keyframe, in temporal order.
    pub nodes: Vec<u32>,
    /// 1-based ordinal pairs into `nodes`.
    pub edges: Vec<(usize, usize)>,
}

impl KeyframeGraph {
    pub fn new(nodes: Vec<u32>) -> Self {
        let edges = build_keyframe_graph(nodes.len());
        KeyframeGraph { nodes, edges }
    }

    pub fn from_fragments(fragments: &[Fragment]) -> Self {
        KeyframeGraph::new(fragments.iter().map(Fragment::keyframe).collect())
    }

    /// Frame-index pair of an edge.
    pub fn edge_frames(&self, e: (usize, usize)) -> (u32, u32) {
        (self.nodes[e.0 - 1], self.nodes[e.1 - 1])
    }
}

/// Every image pair the registration of `n` frames in windows of `k` reads:
/// keyframe-to-member pairs inside each fragment plus the keyframe graph
/// edges. Sorted by `(view_a, view_b)`.
pub fn required_pairs(n: usize, k: usize) -> Result<Vec<(u32, u32)>, RegistrationError> {
    let fragments = partition(n, k)?;
    let mut pairs: Vec<(u32, u32)> = fragments
        .iter()
        .flat_map(|f| f.frames[1..].iter().map(move |&j| (f.keyframe(), j)))
        .collect();
    let graph = KeyframeGraph::from_fragments(&fragments);
    pairs.extend(graph.edges.iter().map(|&e| graph.edge_frames(e)));
    pairs.sort_unstable();
    Ok(pairs)
}

/// Keyframe pixels matched in every keyframe-to-member pair of a fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    /// Row-major keyframe pixel indices, ascending.
    pub pixels: Vec<usize>,
    /// For each non-key frame (fragment order), the target pixel of each
    /// entry of `pixels`.
    pub targets: Vec<(u32, Vec<Vector2<f64>>)>,
}

pub fn intersect_correspondences(
    fragment: &Fragment,
    bundle: &PriorBundle,
) -> Result<Correspondences, RegistrationError> {
    let key = fragment.keyframe();
    let (w, h) = (bundle.intrinsics.width, bundle.intrinsics.height);
    let mut per_frame: Vec<(u32, BTreeMap<usize, Vector2<f64>>)> = Vec::new();
    for &f in &fragment.frames[1..] {
        let pair = bundle
            .get(key, f)
            .ok_or(RegistrationError::MissingPair(key, f))?;
        let mut map = BTreeMap::new();
        for m in &pair.matches {
            let x = (m[0].round() as i64).clamp(0, w as i64 - 1) as usize;
            let y = (m[1].round() as i64).clamp(0, h as i64 - 1) as usize;
            map.entry(y * w + x)
                .or_insert_with(|| Vector2::new(m[2] as f64, m[3] as f64));
        }
        per_frame.push((f, map));
    }
    let pixels: Vec<usize> = match per_frame.split_first() {
        None => Vec::new(),
        Some(((_, first), rest)) => first
            .keys()
            .copied()
            .filter(|p| rest.iter().all(|(_, m)| m.contains_key(p)))
            .collect(),
    };
    if pixels.len() < 6 {
        return Err(RegistrationError::EmptyIntersection {
            fragment: fragment.index,
            survivors: pixels.len(),
        });
    }
    let targets = per_frame
        .into_iter()
        .map(|(f, m)| (f, pixels.iter().map(|p| m[p]).collect()))
        .collect();
    Ok(Correspondences { pixels, targets })
}

/// Median of `‖key_i‖ / ‖frame_i‖`; the mean of the two middle ratios for
/// even counts.
pub fn estimate_scale(
    key_points: &[Vector3<f64>],
    frame_points: &[Vector3<f64>],
) -> Result<f64, RegistrationError> {
    if key_points.len() != frame_points.len() || key_points.is_empty() {
        return Err(RegistrationError::ScaleInput(
            key_points.len(),
            frame_points.len(),
        ));
    }
    let mut ratios = Vec::with_capacity(key_points.len());
    for (i, (a, b)) in key_points.iter().zip(frame_points).enumerate() {
        let nb = b.norm();
        if nb == 0.0 {
            return Err(RegistrationError::ZeroNormPoint(i));
        }
        ratios.push(a.norm() / nb);
    }
    ratios.sort_unstable_by(f64::total_cmp);
    let n = ratios.len();
    Ok(if n % 2 == 1 {
        ratios[n / 2]
    } else {
        (ratios[n / 2 - 1] + ratios[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRegistration {
    pub frame: u32,
    /// Maps keyframe-camera coordinates into this frame's camera.
    pub pose: Pose,
    pub scale: f64,
    pub inlier_ratio: f64,
    /// Dense per-pixel points in keyframe-camera coordinates.
    pub pointmap: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentRegistration {
    pub fragment: Fragment,
    /// Keyframe entry first, identity pose and unit scale.
    pub frames: Vec<FrameRegistration>,
}

impl FragmentRegistration {
    pub fn get(&self, frame: u32) -> Option<&FrameRegistration> {
        self.frames.iter().find(|f| f.frame == frame)
    }
}

fn mix_seed(seed: u64, frame: u32) -> u64 {
    (seed ^ 0xa076_1d64_78bd_642f).wrapping_mul(0xe703_7ed1_a0b4_28db) ^ frame as u64
}

/// Registers every non-key frame of `fragment` against the keyframe's
/// aligned pointmap.
pub fn register_fragment(
    fragment: &Fragment,
    bundle: &PriorBundle,
    alignment: &KeyframeAlignment,
    ransac: &RansacSpec,
) -> Result<FragmentRegistration, RegistrationError> {
    let key = fragment.keyframe();
    let local = alignment
        .local_pointmap(key)
        .ok_or(RegistrationError::DisconnectedGraph(key))?;
    let mut frames = vec![FrameRegistration {
        frame: key,
        pose: Pose::identity(),
        scale: 1.0,
        inlier_ratio: 1.0,
        pointmap: local.clone(),
    }];
    if fragment.frames.len() == 1 {
        return Ok(FragmentRegistration {
            fragment: fragment.clone(),
            frames,
        });
    }
    let corr = intersect_correspondences(fragment, bundle)?;
    let key_points: Vec<Vector3<f64>> = corr.pixels.iter().map(|&p| local[p]).collect();
    for (frame, targets) in &corr.targets {
        let pair = bundle
            .get(key, *frame)
            .ok_or(RegistrationError::MissingPair(key, *frame))?;
        let spec = RansacSpec {
            seed: mix_seed(ransac.seed, *frame),
            ..*ransac
        };
        let pnp = pnp_ransac_pose(&key_points, targets, &bundle.intrinsics, &spec)?;
        let frame_points: Vec<Vector3<f64>> =
            corr.pixels.iter().map(|&p| pair.point_a(p)).collect();
        let scale = estimate_scale(&key_points, &frame_points)?;
        let pointmap = (0..pair.pixel_count())
            .map(|p| pair.point_b(p) * scale)
            .collect();
        frames.push(FrameRegistration {
            frame: *frame,
            pose: pnp.pose,
            scale,
            inlier_ratio: pnp.inliers.len() as f64 / key_points.len() as f64,
            pointmap,
        });
    }
    Ok(FragmentRegistration {
        fragment: fragment.clone(),
        frames,
    })
}

/// Pixel centre of row-major index `p`.
pub fn pixel_center(k: &CameraIntrinsics, p: usize) -> Vector2<f64> {
    Vector2::new((p % k.width) as f64, (p / k.width) as f64)
}
