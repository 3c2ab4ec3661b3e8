//! Perspective-n-point: a minimal three-point solver inside RANSAC, then
//! damped Gauss-Newton on the consensus set.

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RegistrationError;
use crate::geometry::{align_rigid, skew, CameraIntrinsics, Pose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacSpec {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Minimum inlier fraction below which the estimate is rejected.
    pub min_inlier_ratio: f64,
}

impl Default for RansacSpec {
    fn default() -> Self {
        RansacSpec {
            threshold: 2.0,
            iterations: 500,
            seed: 0,
            min_inlier_ratio: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

const SCAN: usize = 256;

/// All poses consistent with three world points seen along three bearings
/// (unit vectors in the camera frame).
///
/// Distances along the bearings follow from the law of cosines once the
/// first distance `s1` is fixed; the remaining constraint is a scalar
/// function of `s1` on each of four sign branches, whose roots are bracketed
/// by scanning and polished by bisection.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let [b1, b2, b3] = bearings;
    let (c12, c13, c23) = (b1.dot(b2), b1.dot(b3), b2.dot(b3));
    let d12 = (world[0] - world[1]).norm_squared();
    let d13 = (world[0] - world[2]).norm_squared();
    let d23 = (world[1] - world[2]).norm_squared();
    let (q12, q13) = (1.0 - c12 * c12, 1.0 - c13 * c13);
    if q12 <= 1e-12 || q13 <= 1e-12 || d12 <= 0.0 || d13 <= 0.0 || d23 <= 0.0 {
        return Vec::new();
    }
    let smax = (d12 / q12).sqrt().min((d13 / q13).sqrt());

    // distances for branch (sign2, sign3), or None when a root goes negative
    let dist = |s1: f64, sg2: f64, sg3: f64| -> Option<(f64, f64)> {
        let r2 = (d12 - s1 * s1 * q12).max(0.0).sqrt();
        let r3 = (d13 - s1 * s1 * q13).max(0.0).sqrt();
        let s2 = s1 * c12 + sg2 * r2;
        let s3 = s1 * c13 + sg3 * r3;
        (s2 > 0.0 && s3 > 0.0).then_some((s2, s3))
    };
    let residual = |s1: f64, sg2: f64, sg3: f64| -> Option<f64> {
        dist(s1, sg2, sg3).map(|(s2, s3)| s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * c23 - d23)
    };

    let mut out = Vec::new();
    for (sg2, sg3) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let mut prev: Option<(f64, f64)> = None;
        for i in 1..=SCAN {
            let s = smax * i as f64 / SCAN as f64;
            let Some(f) = residual(s, sg2, sg3) else {
                prev = None;
                continue;
            };
            if let Some((sp, fp)) = prev {
                if fp == 0.0 || fp.signum() != f.signum() {
                    let (mut lo, mut hi, mut flo) = (sp, s, fp);
                    for _ in 0..80 {
                        let mid = 0.5 * (lo + hi);
                        match residual(mid, sg2, sg3) {
                            Some(fm) if fm.signum() == flo.signum() && fm != 0.0 => {
                                lo = mid;
                                flo = fm;
                            }
                            Some(_) => hi = mid,
                            None => break,
                        }
                    }
                    let s1 = 0.5 * (lo + hi);
                    if let Some((s2, s3)) = dist(s1, sg2, sg3) {
                        let cam = [b1 * s1, b2 * s2, b3 * s3];
                        if let Some(t) = align_rigid(world, &cam, None) {
                            out.push(t.pose);
                        }
                    }
                }
            }
            prev = Some((s, f));
        }
    }
    out
}

fn reprojection_sq(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>, px: &Vector2<f64>) -> f64 {
    let pc = pose.transform_point(x);
    if pc.z <= MIN_DEPTH {
        return f64::INFINITY;
    }
    (k.project_camera(&pc) - px).norm_squared()
}

fn inliers_of(
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    threshold: f64,
) -> Vec<usize> {
    let t2 = threshold * threshold;
    (0..points.len())
        .filter(|&i| reprojection_sq(pose, k, &points[i], &pixels[i]) < t2)
        .collect()
}

/// Levenberg-Marquardt on the sum of squared reprojection errors.
pub fn refine_pose(
    pose: &Pose,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    iterations: usize,
) -> Pose {
    let cost = |p: &Pose| -> f64 {
        points
            .iter()
            .zip(pixels)
            .map(|(x, px)| reprojection_sq(p, k, x, px))
            .sum()
    };
    let mut pose = *pose;
    let mut current = cost(&pose);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, px) in points.iter().zip(pixels) {
            let pc = pose.transform_point(x);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let r = k.project_camera(&pc) - px;
            let iz = 1.0 / pc.z;
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            );
            let mut j = Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dproj);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * -skew(&pc)));
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * (h[(d, d)] + 1e-12);
            }
            let Some(step) = damped.lu().solve(&(-g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = pose.retract(&[step[0], step[1], step[2], step[3], step[4], step[5]]);
            let c = cost(&cand);
            if c < current {
                pose = cand;
                let rel = (current - c) / current.max(1e-300);
                current = c;
                lambda = (lambda * 0.3).max(1e-9);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

/// Pose mapping `points` onto `pixels`, robust to outlying correspondences.
pub fn pnp_ransac_pose(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &CameraIntrinsics,
    spec: &RansacSpec,
) -> Result<PnpResult, RegistrationError> {
    let n = points.len().min(pixels.len());
    if n < 6 || points.len() != pixels.len() {
        return Err(RegistrationError::InsufficientCorrespondences(n));
    }
    let bearings: Vec<Vector3<f64>> = pixels.iter().map(|p| k.ray(*p).normalize()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..spec.iterations {
        let idx = sample(&mut rng, n, 3);
        let (a, b, c) = (idx.index(0), idx.index(1), idx.index(2));
        let world = [points[a], points[b], points[c]];
        let rays = [bearings[a], bearings[b], bearings[c]];
        for cand in p3p(&world, &rays) {
            let count = inliers_of(&cand, points, pixels, k, spec.threshold).len();
            if best.as_ref().map_or(true, |(bc, _)| count > *bc) {
                best = Some((count, cand));
            }
        }
    }
    let (count, mut pose) = best.ok_or(RegistrationError::NoConsensus {
        inliers: 0,
        total: n,
    })?;
    if (count as f64) < spec.min_inlier_ratio * n as f64 || count < 6 {
        return Err(RegistrationError::NoConsensus {
            inliers: count,
            total: n,
        });
    }
    let mut inliers = inliers_of(&pose, points, pixels, k, spec.threshold);
    for _ in 0..3 {
        let pts: Vec<_> = inliers.iter().map(|&i| points[i]).collect();
        let pxs: Vec<_> = inliers.iter().map(|&i| pixels[i]).collect();
        pose = refine_pose(&pose, &pts, &pxs, k, 50);
        let next = inliers_of(&pose, points, pixels, k, spec.threshold);
        if next == inliers {
            break;
        }
        if next.len() < 6 {
            break;
        }
        inliers = next;
    }
    Ok(PnpResult { pose, inliers })
}
