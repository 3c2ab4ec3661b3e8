//! Procedural desk-scale scenes with exact geometry, used to synthesize
//! frames and prior bundles whose ground truth is known.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{PairwisePrior, PriorBundle, PriorError};
use crate::geometry::{CameraIntrinsics, Pose, Trajectory};
use crate::image::{Frame, Image};

/// Confidence assigned to pixels hidden from the other view of a pair.
pub const OCCLUDED_CONFIDENCE: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub direction: Vector3<f64>,
    pub frequency: f64,
    pub phase: f64,
    pub amplitude: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.direction.dot(p) * w.frequency + w.phase).sin();
            for ch in 0..3 {
                c[ch] += w.amplitude[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.02, 0.98))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// Interior of an axis-aligned box; the camera must stay inside.
    Room {
        min: Vector3<f64>,
        max: Vector3<f64>,
        tints: [[f64; 3]; 6],
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub surface: Surface,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays with unit z in the camera frame.
    pub t: f64,
    pub point: Vector3<f64>,
    pub color: [f64; 3],
}

impl Primitive {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        match &self.surface {
            Surface::Room { min, max, tints } => {
                let mut best = f64::INFINITY;
                let mut face = 0;
                for axis in 0..3 {
                    let (t, f) = if d[axis] > 0.0 {
                        ((max[axis] - o[axis]) / d[axis], 2 * axis + 1)
                    } else if d[axis] < 0.0 {
                        ((min[axis] - o[axis]) / d[axis], 2 * axis)
                    } else {
                        continue;
                    };
                    if t < best {
                        best = t;
                        face = f;
                    }
                }
                if !(best.is_finite() && best > 0.0) {
                    return None;
                }
                let p = o + d * best;
                let mut c = self.texture.color(&p);
                for ch in 0..3 {
                    c[ch] = (c[ch] * tints[face][ch]).clamp(0.02, 0.98);
                }
                Some((best, c))
            }
            Surface::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                let t = if t0 > 1e-9 {
                    t0
                } else if t1 > 1e-9 {
                    t1
                } else {
                    return None;
                };
                Some((t, self.texture.color(&(o + d * t))))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation of iid Gaussian noise on every pointmap coordinate,
    /// in world units.
    pub pointmap_sigma: f64,
    /// Range of the per-view scale factor applied to a pair's pointmaps.
    pub scale_jitter: (f64, f64),
    /// Fixed jitter for specific `view_b` frames, overriding the range.
    pub jitter_overrides: BTreeMap<u32, f64>,
    pub outlier_fraction: f64,
    pub matches_per_pair: usize,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            pointmap_sigma: 0.0,
            scale_jitter: (1.0, 1.0),
            jitter_overrides: BTreeMap::new(),
            outlier_fraction: 0.0,
            matches_per_pair: 400,
        }
    }

    /// Pointmap noise at 0.5 % of the scene diameter, 10 % match outliers and
    /// ±20 % pair scale ambiguity.
    pub fn moderate(diameter: f64) -> Self {
        NoiseSpec {
            pointmap_sigma: 0.005 * diameter,
            scale_jitter: (0.8, 1.2),
            jitter_overrides: BTreeMap::new(),
            outlier_fraction: 0.1,
            matches_per_pair: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Trajectory,
    pub primitives: Vec<Primitive>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

fn wave(dir: [f64; 3], frequency: f64, phase: f64, amplitude: [f64; 3]) -> Wave {
    Wave {
        direction: Vector3::from(dir).normalize(),
        frequency,
        phase,
        amplitude,
    }
}

impl SyntheticScene {
    /// A textured room with three spheres, observed by a camera sweeping
    /// sideways while panning. `size` is the square image side in pixels.
    pub fn desk(frames: usize, size: usize, seed: u64) -> Self {
        let f = 0.9 * size as f64;
        let c = size as f64 / 2.0;
        let intrinsics = CameraIntrinsics::new(f, f, c, c, size, size).expect("valid intrinsics");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let mut jitter = |a: f64| a * (1.0 + 0.2 * (rng.random::<f64>() - 0.5));
        let room = Primitive {
            surface: Surface::Room {
                min: Vector3::new(-2.5, -1.5, -2.5),
                max: Vector3::new(2.5, 1.5, 4.5),
                tints: [
                    [1.0, 0.85, 0.8],
                    [0.8, 0.9, 1.0],
                    [0.9, 1.0, 0.85],
                    [1.0, 1.0, 0.9],
                    [0.95, 0.85, 1.0],
                    [1.0, 1.0, 1.0],
                ],
            },
            texture: Texture {
                base: [0.55, 0.5, 0.45],
                waves: vec![
                    wave([1.0, 0.3, 0.2], jitter(4.0), 0.3, [0.18, 0.1, 0.05]),
                    wave([0.2, 1.0, -0.4], jitter(5.0), 1.1, [0.05, 0.15, 0.1]),
                    wave([-0.5, 0.4, 1.0], jitter(3.0), 2.0, [0.1, 0.05, 0.18]),
                ],
            },
        };
        let sphere = |center: [f64; 3], radius: f64, base: [f64; 3], fr: f64| Primitive {
            surface: Surface::Sphere {
                center: Vector3::from(center),
                radius,
            },
            texture: Texture {
                base,
                waves: vec![
                    wave([1.0, 0.0, 0.5], fr, 0.0, [0.12, 0.12, 0.12]),
                    wave([0.0, 1.0, 0.3], 0.8 * fr, 1.0, [0.1, -0.05, 0.08]),
                ],
            },
        };
        let primitives = vec![
            room,
            sphere([-0.9, 0.3, 2.0], 0.6, [0.75, 0.4, 0.3], jitter(6.0)),
            sphere([0.8, -0.2, 2.6], 0.7, [0.3, 0.55, 0.7], jitter(5.0)),
            sphere([0.1, 0.8, 1.4], 0.35, [0.6, 0.7, 0.35], jitter(8.0)),
        ];
        let n = frames.max(2);
        let entries = (0..frames)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                let center = Vector3::new(
                    -1.0 + 2.0 * s,
                    -0.1 + 0.15 * (std::f64::consts::PI * s).sin(),
                    -1.4 + 0.3 * (2.0 * std::f64::consts::PI * s).sin(),
                );
                // world-to-camera: yaw about y then a small pitch
                let yaw = 0.28 - 0.56 * s;
                let pitch = 0.05 * (3.0 * s).sin();
                let cam_to_world = UnitQuaternion::from_euler_angles(pitch, -yaw, 0.0);
                (i as u32 + 1, Pose::from_center(cam_to_world.inverse(), center))
            })
            .collect();
        SyntheticScene {
            intrinsics,
            trajectory: Trajectory::new(entries).expect("increasing indices"),
            primitives,
            noise: NoiseSpec::none(),
            seed,
        }
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    /// Diagonal of the bounding box of all primitives.
    pub fn diameter(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            let (a, b) = match &p.surface {
                Surface::Room { min, max, .. } => (*min, *max),
                Surface::Sphere { center, radius } => {
                    (center - Vector3::repeat(*radius), center + Vector3::repeat(*radius))
                }
            };
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (hi - lo).norm()
    }

    pub fn frame_count(&self) -> usize {
        self.trajectory.len()
    }

    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, [f64; 3])> = None;
        for p in &self.primitives {
            if let Some((t, c)) = p.intersect(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, c));
                }
            }
        }
        best.map(|(t, color)| Hit {
            t,
            point: origin + dir * t,
            color,
        })
    }

    fn pose(&self, frame: u32) -> Result<Pose, PriorError> {
        self.trajectory
            .get(frame)
            .copied()
            .ok_or(PriorError::FrameOutOfRange(frame))
    }

    /// Ray-casts every pixel of `frame`: world points and colors.
    pub fn cast_frame(&self, frame: u32) -> Result<(Vec<Vector3<f64>>, Image), PriorError> {
        let pose = self.pose(frame)?;
        let k = &self.intrinsics;
        let center = pose.center();
        let to_world = pose.rotation().inverse();
        let mut points = Vec::with_capacity(k.pixel_count());
        let mut img = Image::new(k.width, k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                let d = to_world * k.ray(Vector2::new(x as f64, y as f64));
                let hit = self
                    .cast(&center, &d)
                    .expect("camera must stay inside the room");
                points.push(hit.point);
                img.set_pixel(x, y, hit.color);
            }
        }
        Ok((points, img))
    }

    pub fn render_frame(&self, frame: u32) -> Result<Frame, PriorError> {
        let (_, image) = self.cast_frame(frame)?;
        Ok(Frame { index: frame, image })
    }

    pub fn frames(&self) -> Vec<Frame> {
        self.trajectory
            .indices()
            .map(|i| self.render_frame(i).expect("frame in trajectory"))
            .collect()
    }

    /// Camera-frame depth maps for `frame`.
    pub fn depth_map(&self, frame: u32) -> Result<Vec<f64>, PriorError> {
        let pose = self.pose(frame)?;
        let (pts, _) = self.cast_frame(frame)?;
        Ok(pts.iter().map(|p| pose.transform_point(p).z).collect())
    }

    /// `Some(true)` if `point` is seen by the camera, `Some(false)` if it is in
    /// the frustum but hidden, `None` if outside the frustum.
    pub fn visibility(&self, pose: &Pose, point: &Vector3<f64>) -> Option<bool> {
        let pc = pose.transform_point(point);
        if pc.z <= 1e-6 {
            return None;
        }
        let px = self.intrinsics.project_camera(&pc);
        if !self.intrinsics.contains(&px) {
            return None;
        }
        let c = pose.center();
        let hit = self.cast(&c, &(point - c))?;
        Some(hit.t >= 1.0 - 1e-6)
    }
}

/// A generated bundle plus the generator's bookkeeping.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub bundle: PriorBundle,
    /// Rows of each pair's match list that were replaced by random pixels.
    pub outlier_rows: BTreeMap<(u32, u32), Vec<usize>>,
    /// Scale factor applied to each pair's pointmaps.
    pub jitter: BTreeMap<(u32, u32), f64>,
}

fn mix(seed: u64, a: u32, b: u32) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

/// Builds prior outputs for `pairs` from the scene's exact geometry.
pub fn generate_synthetic(
    scene: &SyntheticScene,
    pairs: &[(u32, u32)],
) -> Result<SyntheticBundle, PriorError> {
    let k = scene.intrinsics;
    let n = k.pixel_count();
    let noise = &scene.noise;
    let mut cache: BTreeMap<u32, Vec<Vector3<f64>>> = BTreeMap::new();
    for &(a, b) in pairs {
        for f in [a, b] {
            if !cache.contains_key(&f) {
                cache.insert(f, scene.cast_frame(f)?.0);
            }
        }
    }
    let mut bundle = PriorBundle::new(k);
    let mut outlier_rows = BTreeMap::new();
    let mut jitters = BTreeMap::new();
    for &(a, b) in pairs {
        let pose_a = scene.pose(a)?;
        let pose_b = scene.pose(b)?;
        let (pts_a, pts_b) = (&cache[&a], &cache[&b]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, a, b));
        let jitter = match noise.jitter_overrides.get(&b) {
            Some(j) => *j,
            None => {
                let (lo, hi) = noise.scale_jitter;
                let mut vrng = ChaCha8Rng::seed_from_u64(mix(scene.seed, 0, b));
                lo + (hi - lo) * vrng.random::<f64>()
            }
        };
        let pointmap = |pts: &[Vector3<f64>], rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut out = Vec::with_capacity(3 * n);
            for p in pts {
                let mut q = pose_a.transform_point(p);
                if noise.pointmap_sigma > 0.0 {
                    for c in 0..3 {
                        let e: f64 = rng.sample(StandardNormal);
                        q[c] += noise.pointmap_sigma * e;
                    }
                }
                out.extend((q * jitter).iter().map(|v| *v as f32));
            }
            out
        };
        let pointmap_a = pointmap(pts_a, &mut rng);
        let pointmap_b = pointmap(pts_b, &mut rng);
        let confidence = |pts: &[Vector3<f64>], other: &Pose| -> Vec<f32> {
            pts.iter()
                .map(|p| match scene.visibility(other, p) {
                    Some(false) => OCCLUDED_CONFIDENCE,
                    _ => 1.0,
                })
                .collect()
        };
        let confidence_a = confidence(pts_a, &pose_b);
        let confidence_b = confidence(pts_b, &pose_a);

        // Candidate keyframe pixels come from a permutation seeded by view_a
        // alone, so every pair sharing view_a draws from the same sequence.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(scene.seed, a, 0)));
        let mut matches = Vec::with_capacity(noise.matches_per_pair);
        for &pix in &order {
            if matches.len() == noise.matches_per_pair {
                break;
            }
            let p = &pts_a[pix];
            if scene.visibility(&pose_b, p) != Some(true) {
                continue;
            }
            let pc = pose_b.transform_point(p);
            let target = k.project_camera(&pc);
            let (x, y) = ((pix % k.width) as f32, (pix / k.width) as f32);
            matches.push([x, y, target.x as f32, target.y as f32]);
        }
        let outliers = (noise.outlier_fraction * matches.len() as f64).round() as usize;
        let mut rows: Vec<usize> = (0..matches.len()).collect();
        rows.shuffle(&mut rng);
        let mut rows: Vec<usize> = rows.into_iter().take(outliers).collect();
        rows.sort_unstable();
        for &r in &rows {
            matches[r][2] = rng.random_range(0.0..(k.width - 1) as f32);
            matches[r][3] = rng.random_range(0.0..(k.height - 1) as f32);
        }
        bundle.insert(PairwisePrior {
            view_a: a,
            view_b: b,
            width: k.width,
            height: k.height,
            pointmap_a,
            pointmap_b,
            confidence_a,
            confidence_b,
            matches,
        })?;
        outlier_rows.insert((a, b), rows);
        jitters.insert((a, b), jitter);
    }
    Ok(SyntheticBundle {
        bundle,
        outlier_rows,
        jitter: jitters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_pointmap_b_is_ground_truth() {
        let scene = SyntheticScene::desk(4, 24, 3);
        let out = generate_synthetic(&scene, &[(1, 3)]).unwrap();
        let pair = out.bundle.get(1, 3).unwrap();
        let (pts, _) = scene.cast_frame(3).unwrap();
        let pose_a = scene.trajectory.get(1).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let q = pose_a.transform_point(p);
            let got = pair.point_b(i);
            for c in 0..3 {
                assert_eq!(got[c] as f32, q[c] as f32);
            }
        }
        assert!(out.outlier_rows[&(1, 3)].is_empty());
        assert_eq!(out.jitter[&(1, 3)], 1.0);
    }

    #[test]
    fn outlier_count_is_exact() {
        let mut noise = NoiseSpec::none();
        noise.outlier_fraction = 0.3;
        noise.matches_per_pair = 200;
        let scene = SyntheticScene::desk(4, 32, 1).with_noise(noise);
        let out = generate_synthetic(&scene, &[(1, 2)]).unwrap();
        assert_eq!(out.bundle.get(1, 2).unwrap().matches.len(), 200);
        assert_eq!(out.outlier_rows[&(1, 2)].len(), 60);
    }

    #[test]
    fn jitter_scales_pointmaps() {
        let mut noise = NoiseSpec::none();
        noise.jitter_overrides.insert(2, 0.5);
        let scene = SyntheticScene::desk(4, 16, 0);
        let clean = generate_synthetic(&scene, &[(1, 2)]).unwrap();
        let scaled = generate_synthetic(&scene.clone().with_noise(noise), &[(1, 2)]).unwrap();
        let (c, s) = (clean.bundle.get(1, 2).unwrap(), scaled.bundle.get(1, 2).unwrap());
        for i in 0..c.pixel_count() {
            assert!((s.point_b(i) - c.point_b(i) * 0.5).norm() < 1e-5);
        }
    }

    #[test]
    fn frame_out_of_range() {
        let scene = SyntheticScene::desk(4, 16, 0);
        assert!(matches!(
            generate_synthetic(&scene, &[(1, 9)]),
            Err(PriorError::FrameOutOfRange(9))
        ));
    }

    #[test]
    fn occluded_pixels_get_low_confidence() {
        let scene = SyntheticScene::desk(16, 32, 0);
        let out = generate_synthetic(&scene, &[(1, 16)]).unwrap();
        let pair = out.bundle.get(1, 16).unwrap();
        let low = pair.confidence_a.iter().filter(|c| **c == OCCLUDED_CONFIDENCE).count();
        assert!(low > 0, "spheres should hide some wall pixels between distant views");
        assert!(pair.confidence_a.iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn matches_are_exact_projections() {
        let scene = SyntheticScene::desk(8, 32, 0);
        let out = generate_synthetic(&scene, &[(1, 4)]).unwrap();
        let pair = out.bundle.get(1, 4).unwrap();
        let (pts, _) = scene.cast_frame(1).unwrap();
        let pose_b = scene.trajectory.get(4).unwrap();
        for m in &pair.matches {
            assert_eq!(m[0].fract(), 0.0);
            let pix = m[1] as usize * 32 + m[0] as usize;
            let px = scene.intrinsics.project_camera(&pose_b.transform_point(&pts[pix]));
            assert!((px.x - m[2] as f64).abs() < 1e-3 && (px.y - m[3] as f64).abs() < 1e-3);
        }
    }
}
