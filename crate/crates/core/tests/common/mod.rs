#![allow(dead_code)]

use fragsplat::geometry::{CameraIntrinsics, Pose};
use fragsplat::render::{render, render_backward, RenderGradients};
use fragsplat::splat::{Gaussian, GaussianSet, Source};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error. Central differences at
/// `FD_STEP` carry an O(h^2) truncation error of a few 1e-6 on these scenes,
/// which swamps entries much smaller than this.
pub const FD_FLOOR: f64 = 1e-2;

pub fn square_camera(size: usize) -> CameraIntrinsics {
    let f = size as f64;
    CameraIntrinsics::new(f, f, f / 2.0 - 0.5, f / 2.0 - 0.5, size, size).unwrap()
}

/// Random scene of `count` Gaussians in front of a slightly rotated camera.
/// Depths are kept apart so the finite-difference step never reorders them.
pub fn random_scene(seed: u64, count: usize) -> (GaussianSet, Pose, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depths: Vec<f64> = (0..count).map(|i| 2.0 + 0.15 * i as f64 + rng.random_range(0.0..0.05)).collect();
    for i in (1..count).rev() {
        depths.swap(i, rng.random_range(0..=i));
    }
    let gaussians = depths
        .iter()
        .enumerate()
        .map(|(i, z)| Gaussian {
            center: Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, *z),
            color: [rng.random(), rng.random(), rng.random()],
            opacity: rng.random_range(0.2..0.9),
            // screen radii of 2 to 6 pixels
            scale: rng.random_range(2.0..6.0) * z / 32.0,
            source: Source { fragment: 1, frame: 1, pixel: i as u32 },
        })
        .collect();
    let pose = Pose::new(
        UnitQuaternion::from_euler_angles(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        ),
        Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0),
    );
    let weights = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    (GaussianSet::new(gaussians, (1, 1)), pose, weights)
}

fn linear_loss(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics, w: &[f64]) -> f64 {
    render(set, pose, k).color.iter().zip(w).map(|(c, w)| c * w).sum()
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between analytic and central-difference gradients
/// of a random linear image loss, over every parameter of the scene.
pub fn max_gradient_error(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics, w: &[f64]) -> f64 {
    gradient_error(set, pose, k, w, FD_STEP, FD_FLOOR)
}

pub fn gradient_error(
    set: &GaussianSet,
    pose: &Pose,
    k: &CameraIntrinsics,
    w: &[f64],
    h: f64,
    floor: f64,
) -> f64 {
    let fwd = render(set, pose, k);
    let g: RenderGradients = render_backward(set, pose, k, &fwd, w).unwrap();
    let mut worst: f64 = 0.0;
    let central = |f: &dyn Fn(f64) -> GaussianSet| {
        (linear_loss(&f(h), pose, k, w) - linear_loss(&f(-h), pose, k, w)) / (2.0 * h)
    };
    for i in 0..set.len() {
        for a in 0..3 {
            let fd = central(&|d| {
                let mut s = set.clone();
                s.gaussians[i].center[a] += d;
                s
            });
            worst = worst.max(relative(g.center[i][a], fd, floor));
            let fd = central(&|d| {
                let mut s = set.clone();
                s.gaussians[i].color[a] += d;
                s
            });
            worst = worst.max(relative(g.color[i][a], fd, floor));
        }
        let fd = central(&|d| {
            let mut s = set.clone();
            s.gaussians[i].opacity += d;
            s
        });
        worst = worst.max(relative(g.opacity[i], fd, floor));
        // scale is stepped in log space, the coordinates the optimizer uses
        let fd = central(&|d| {
            let mut s = set.clone();
            s.gaussians[i].scale *= d.exp();
            s
        });
        worst = worst.max(relative(g.scale[i] * set.gaussians[i].scale, fd, floor));
    }
    for a in 0..6 {
        let mut xi = [0.0; 6];
        xi[a] = h;
        let plus = linear_loss(set, &pose.retract(&xi), k, w);
        xi[a] = -h;
        let minus = linear_loss(set, &pose.retract(&xi), k, w);
        worst = worst.max(relative(g.pose[a], (plus - minus) / (2.0 * h), floor));
    }
    worst
}

/// One initial Gaussian per pixel of each frame, placed on the exact
/// surface in world coordinates.
pub fn oracle_set(scene: &fragsplat::prior::SyntheticScene, frames: &[u32]) -> GaussianSet {
    let k = scene.intrinsics;
    let mut gaussians = Vec::new();
    for &f in frames {
        let (points, image) = scene.cast_frame(f).unwrap();
        let pose = scene.trajectory.get(f).unwrap();
        for (p, x) in points.iter().enumerate() {
            gaussians.push(Gaussian {
                center: *x,
                color: [image.data[3 * p], image.data[3 * p + 1], image.data[3 * p + 2]],
                opacity: fragsplat::splat::INITIAL_OPACITY,
                scale: pose.transform_point(x).z / k.fx,
                source: Source { fragment: 1, frame: f, pixel: p as u32 },
            });
        }
    }
    GaussianSet::new(gaussians, (frames[0], *frames.last().unwrap()))
}
