//! Pairwise merging of fragment reconstructions up a binary tree.
//!
//! A node owns a Gaussian set and camera poses, all expressed in the camera
//! frame of its first keyframe. Merging aligns the right node to the frozen
//! left node, drops right Gaussians whose source pixel the left node already
//! covers, concatenates, and refines the union jointly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose, SimTransform, Trajectory};
use crate::image::Frame;
use crate::optim::{
    confident_pixels, joint_optimize, optimize_similarity, pose_through, OptimError, OptimSpec,
};
use crate::registration::KeyframeAlignment;
use crate::render::render;
use crate::splat::{concat, transform_set, GaussianSet, SplatError};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("no nodes to merge")]
    Empty,
    #[error("keyframe {0} has no aligned pose")]
    MissingKeyframe(u32),
    #[error("frame {0} has no image")]
    MissingFrame(u32),
    #[error("frame {0} has no pose")]
    MissingPose(u32),
    #[error("node {0:?} has no training frame")]
    NoTrainingFrames((u32, u32)),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One level of the merge tree, in terms of the previous level's nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Merge(usize, usize),
    Promote(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTree {
    pub leaves: usize,
    pub levels: Vec<Vec<Step>>,
}

impl MergeTree {
    pub fn merge_count(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .filter(|s| matches!(s, Step::Merge(..)))
            .count()
    }

    /// Leaf index range `[first, last]` covered by every node of every level,
    /// starting with the leaves themselves.
    pub fn ranges(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![(0..self.leaves).map(|i| (i, i)).collect::<Vec<_>>()];
        for level in &self.levels {
            let prev = out.last().unwrap();
            let next = level
                .iter()
                .map(|s| match *s {
                    Step::Merge(a, b) => (prev[a].0, prev[b].1),
                    Step::Promote(a) => prev[a],
                })
                .collect();
            out.push(next);
        }
        out
    }
}

/// Pairs neighbours left to right at every level; an odd node out moves up
/// unchanged.
pub fn build_merge_tree(m: usize) -> MergeTree {
    let mut levels = Vec::new();
    let mut width = m;
    while width > 1 {
        let mut level: Vec<Step> = (0..width / 2).map(|i| Step::Merge(2 * i, 2 * i + 1)).collect();
        if width % 2 == 1 {
            level.push(Step::Promote(width - 1));
        }
        width = level.len();
        levels.push(level);
    }
    MergeTree { leaves: m, levels }
}

/// A partial reconstruction in the camera frame of `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub set: GaussianSet,
    /// Every registered frame of the node, training or held out.
    pub poses: BTreeMap<u32, Pose>,
    /// Frames whose images drive optimization, ascending.
    pub training: Vec<u32>,
    /// Keyframe defining the node's coordinate frame.
    pub anchor: u32,
}

impl Node {
    pub fn range(&self) -> (u32, u32) {
        let first = *self.poses.keys().next().unwrap_or(&0);
        let last = *self.poses.keys().next_back().unwrap_or(&0);
        (first, last)
    }

    pub fn trajectory(&self) -> Result<Trajectory, GeometryError> {
        Trajectory::new(self.poses.iter().map(|(f, p)| (*f, *p)).collect())
    }

    fn training_poses(&self) -> Result<Vec<Pose>, HierarchyError> {
        self.training
            .iter()
            .map(|f| self.poses.get(f).copied().ok_or(HierarchyError::MissingPose(*f)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    pub beta: f64,
    /// Iterations and steps of the similarity fit.
    pub align: OptimSpec,
    /// Joint refinement after every merge.
    pub merge: OptimSpec,
    /// Leading training frames of the moving node used for alignment.
    pub novel_frames: usize,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        HierarchySpec {
            beta: 0.9,
            align: OptimSpec::pose_only(200),
            merge: OptimSpec::default(),
            novel_frames: 2,
        }
    }
}

/// Audit trail of one merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub level: usize,
    pub reference: (u32, u32),
    pub moving: (u32, u32),
    pub reference_count: usize,
    pub moving_count: usize,
    pub kept: usize,
    pub merged_count: usize,
    /// Fingerprint of the reference set before and after alignment.
    pub reference_hash: (u64, u64),
    pub initial: SimTransform,
    pub refined: SimTransform,
    pub align_losses: Vec<f64>,
}

/// Boolean coverage of `set` seen from `pose`: confidence above `beta` and a
/// positive depth.
pub fn visibility_mask(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics, beta: f64) -> Vec<bool> {
    confident_pixels(&render(set, pose, k), beta)
}

/// Keeps the moving Gaussians whose source pixel is uncovered in its source
/// frame's mask and appends them to the reference. Gaussians from frames
/// without a mask are kept.
pub fn merge_pair(
    reference: &GaussianSet,
    moving: &GaussianSet,
    masks: &BTreeMap<u32, Vec<bool>>,
) -> (GaussianSet, usize) {
    let kept: Vec<_> = moving
        .gaussians
        .iter()
        .filter(|g| {
            masks
                .get(&g.source.frame)
                .and_then(|m| m.get(g.source.pixel as usize))
                .map_or(true, |covered| !covered)
        })
        .copied()
        .collect();
    let n = kept.len();
    let pruned = GaussianSet::new(kept, moving.frame_range);
    (concat(reference, &pruned), n)
}

fn images<'a>(
    lookup: &BTreeMap<u32, &'a Frame>,
    frames: &[u32],
) -> Result<Vec<Frame>, HierarchyError> {
    frames
        .iter()
        .map(|f| {
            lookup
                .get(f)
                .map(|fr| (*fr).clone())
                .ok_or(HierarchyError::MissingFrame(*f))
        })
        .collect()
}

fn mix(seed: u64, a: u32, b: u32) -> u64 {
    let x = seed ^ ((a as u64) << 32 | b as u64);
    x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29) ^ seed
}

/// Refines a node's Gaussians and training poses with its anchor fixed.
pub fn refine_node(
    node: &Node,
    lookup: &BTreeMap<u32, &Frame>,
    k: &CameraIntrinsics,
    spec: &OptimSpec,
) -> Result<Node, HierarchyError> {
    if node.training.is_empty() {
        return Err(HierarchyError::NoTrainingFrames(node.range()));
    }
    let frames = images(lookup, &node.training)?;
    let poses = node.training_poses()?;
    let (a, b) = node.range();
    let spec = OptimSpec {
        seed: mix(spec.seed, a, b),
        anchor: Some(node.anchor),
        ..spec.clone()
    };
    let out = joint_optimize(&node.set, &frames, &poses, k, &spec)?;
    let mut refined = node.clone();
    refined.set = out.set;
    for (f, p) in node.training.iter().zip(out.poses) {
        refined.poses.insert(*f, p);
    }
    Ok(refined)
}

/// Fits the transform from the reference node's frame into the moving
/// node's, starting from `initial`. The reference set is only read.
pub fn align_pair(
    reference: &Node,
    moving: &Node,
    initial: &SimTransform,
    lookup: &BTreeMap<u32, &Frame>,
    k: &CameraIntrinsics,
    spec: &HierarchySpec,
) -> Result<(SimTransform, Vec<f64>), HierarchyError> {
    let novel: Vec<u32> = moving.training.iter().take(spec.novel_frames).copied().collect();
    if novel.is_empty() {
        return Err(HierarchyError::NoTrainingFrames(moving.range()));
    }
    let frames = images(lookup, &novel)?;
    let poses: Vec<Pose> = novel.iter().map(|f| moving.poses[f]).collect();
    let fit_spec = OptimSpec {
        beta: spec.beta,
        ..spec.align.clone()
    };
    let fit = optimize_similarity(&reference.set, &frames, &poses, initial, k, &fit_spec)?;
    Ok((fit.transform, fit.losses))
}

/// Aligns, prunes, concatenates and refines two neighbouring nodes.
pub fn merge_nodes(
    reference: &Node,
    moving: &Node,
    initial: &SimTransform,
    lookup: &BTreeMap<u32, &Frame>,
    k: &CameraIntrinsics,
    spec: &HierarchySpec,
    level: usize,
) -> Result<(Node, SimTransform, MergeRecord), HierarchyError> {
    let hash_before = reference.set.fingerprint();
    let (refined, align_losses) = align_pair(reference, moving, initial, lookup, k, spec)?;
    let hash_after = reference.set.fingerprint();
    let inverse = refined.inverse();
    let moved = transform_set(&moving.set, &inverse);
    let mut poses = reference.poses.clone();
    let mut masks = BTreeMap::new();
    for (f, p) in &moving.poses {
        let q = pose_through(&refined, p);
        poses.insert(*f, q);
        if moving.training.contains(f) {
            masks.insert(*f, visibility_mask(&reference.set, &q, k, spec.beta));
        }
    }
    let (set, kept) = merge_pair(&reference.set, &moved, &masks);
    let mut training = reference.training.clone();
    training.extend(&moving.training);
    training.sort_unstable();
    let merged = Node {
        set,
        poses,
        training,
        anchor: reference.anchor,
    };
    let refined_node = refine_node(&merged, lookup, k, &spec.merge)?;
    let record = MergeRecord {
        level,
        reference: reference.range(),
        moving: moving.range(),
        reference_count: reference.set.len(),
        moving_count: moving.set.len(),
        kept,
        merged_count: refined_node.set.len(),
        reference_hash: (hash_before, hash_after),
        initial: *initial,
        refined,
        align_losses,
    };
    Ok((refined_node, refined, record))
}

fn keyframe_transform(
    alignment: &KeyframeAlignment,
    a: u32,
    b: u32,
) -> Result<SimTransform, HierarchyError> {
    alignment.pose(a).ok_or(HierarchyError::MissingKeyframe(a))?;
    alignment
        .relative(a, b)
        .ok_or(HierarchyError::MissingKeyframe(b))
}

fn io_err(path: &Path, source: std::io::Error) -> HierarchyError {
    HierarchyError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn checkpoint(dir: &Path, level: usize, nodes: &[Node]) -> Result<(), HierarchyError> {
    let sub = dir.join(format!("level_{level}"));
    fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
    for (i, n) in nodes.iter().enumerate() {
        n.set.save(&sub.join(format!("node_{i}.vlgs")))?;
        n.trajectory()?.save(&sub.join(format!("node_{i}_trajectory.txt")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct HierarchyResult {
    pub root: Node,
    pub records: Vec<MergeRecord>,
}

/// Merges refined fragment nodes bottom-up along [`build_merge_tree`].
/// Initial transforms come from the global keyframe alignment. When
/// `checkpoints` is given, every level's nodes are written below it.
pub fn run_hierarchy(
    leaves: Vec<Node>,
    alignment: &KeyframeAlignment,
    frames: &[Frame],
    k: &CameraIntrinsics,
    spec: &HierarchySpec,
    checkpoints: Option<&Path>,
) -> Result<HierarchyResult, HierarchyError> {
    if leaves.is_empty() {
        return Err(HierarchyError::Empty);
    }
    let lookup: BTreeMap<u32, &Frame> = frames.iter().map(|f| (f.index, f)).collect();
    let tree = build_merge_tree(leaves.len());
    let mut nodes = leaves;
    let mut records = Vec::new();
    if let Some(dir) = checkpoints {
        checkpoint(dir, 0, &nodes)?;
    }
    for (l, level) in tree.levels.iter().enumerate() {
        let mut next = Vec::with_capacity(level.len());
        for step in level {
            match *step {
                Step::Promote(a) => next.push(nodes[a].clone()),
                Step::Merge(a, b) => {
                    let t = keyframe_transform(alignment, nodes[a].anchor, nodes[b].anchor)?;
                    let (node, _, record) =
                        merge_nodes(&nodes[a], &nodes[b], &t, &lookup, k, spec, l + 1)?;
                    records.push(record);
                    next.push(node);
                }
            }
        }
        nodes = next;
        if let Some(dir) = checkpoints {
            checkpoint(dir, l + 1, &nodes)?;
        }
    }
    let root = nodes.pop().ok_or(HierarchyError::Empty)?;
    Ok(HierarchyResult { root, records })
}

/// Baseline that folds fragments in one at a time. Each initial transform
/// chains the previous refined transform with the keyframe step to the next
/// fragment, so alignment error accumulates along the sequence.
pub fn run_sequential(
    leaves: Vec<Node>,
    alignment: &KeyframeAlignment,
    frames: &[Frame],
    k: &CameraIntrinsics,
    spec: &HierarchySpec,
) -> Result<HierarchyResult, HierarchyError> {
    let lookup: BTreeMap<u32, &Frame> = frames.iter().map(|f| (f.index, f)).collect();
    let mut it = leaves.into_iter();
    let mut acc = it.next().ok_or(HierarchyError::Empty)?;
    let mut records = Vec::new();
    // transform from the accumulated frame into the previous leaf's frame
    let mut chain = SimTransform::identity();
    let mut prev_anchor = acc.anchor;
    for (i, leaf) in it.enumerate() {
        let step = keyframe_transform(alignment, prev_anchor, leaf.anchor)?;
        let initial = step.compose(&chain);
        let (node, refined, record) = merge_nodes(&acc, &leaf, &initial, &lookup, k, spec, i + 1)?;
        records.push(record);
        chain = refined;
        prev_anchor = leaf.anchor;
        acc = node;
    }
    Ok(HierarchyResult { root: acc, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{Gaussian, Source};
    use nalgebra::Vector3;

    #[test]
    fn tree_examples() {
        let t = build_merge_tree(8);
        assert_eq!(t.levels.len(), 3);
        assert_eq!(t.merge_count(), 7);
        let t = build_merge_tree(1);
        assert!(t.levels.is_empty());
        assert_eq!(t.merge_count(), 0);
        let t = build_merge_tree(5);
        assert_eq!(
            t.levels,
            vec![
                vec![Step::Merge(0, 1), Step::Merge(2, 3), Step::Promote(4)],
                vec![Step::Merge(0, 1), Step::Promote(2)],
                vec![Step::Merge(0, 1)],
            ]
        );
        assert_eq!(t.merge_count(), 4);
        assert_eq!(t.ranges().last().unwrap(), &vec![(0, 4)]);
    }

    fn set(frame: u32, n: u32) -> GaussianSet {
        GaussianSet::new(
            (0..n)
                .map(|p| Gaussian {
                    center: Vector3::new(p as f64 * 0.1, 0.0, 2.0),
                    color: [0.5; 3],
                    opacity: 0.1,
                    scale: 0.01,
                    source: Source { fragment: 2, frame, pixel: p },
                })
                .collect(),
            (frame, frame),
        )
    }

    #[test]
    fn merge_pair_counts() {
        let r = set(1, 5);
        let m = set(2, 16);
        let all = BTreeMap::from([(2, vec![true; 16])]);
        assert_eq!(merge_pair(&r, &m, &all).0.gaussians, r.gaussians);
        let none = BTreeMap::from([(2, vec![false; 16])]);
        assert_eq!(merge_pair(&r, &m, &none).0.len(), 21);
        let checker: Vec<bool> = (0..16).map(|p| (p / 4 + p % 4) % 2 == 0).collect();
        let free = checker.iter().filter(|c| !**c).count();
        let out = merge_pair(&r, &m, &BTreeMap::from([(2, checker)]));
        assert_eq!(out.0.len(), 5 + free);
        assert_eq!(out.1, free);
    }

    #[test]
    fn mask_examples() {
        let k = CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        assert!(visibility_mask(&GaussianSet::default(), &Pose::identity(), &k, 0.9)
            .iter()
            .all(|m| !m));
        let dense = GaussianSet::new(
            (0..4)
                .map(|i| Gaussian {
                    center: Vector3::new(0.0, 0.0, 1.2),
                    color: [0.5; 3],
                    opacity: 0.99,
                    scale: 1.0,
                    source: Source { fragment: 1, frame: 1, pixel: i },
                })
                .collect(),
            (1, 1),
        );
        let m = visibility_mask(&dense, &Pose::identity(), &k, 0.9);
        assert!(m[3 * 8 + 3]);
    }
}
