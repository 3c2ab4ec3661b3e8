//! Global keyframe alignment: free world pointmaps per keyframe and one
//! similarity per graph edge, fitted to the pairwise pointmaps under a
//! confidence-weighted L2 residual.

use nalgebra::{Vector2, Vector3};

use super::{pnp_ransac_pose, KeyframeGraph, RansacSpec, RegistrationError};
use crate::geometry::{align_similarity, exp_so3, CameraIntrinsics, Pose, SimTransform};
use crate::optim::{monotone_step, Adam};
use crate::prior::PriorBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignSpec {
    pub iterations: usize,
    pub step: f64,
    /// Used to recover keyframe poses from the aligned pointmaps.
    pub ransac: RansacSpec,
    /// Upper bound on the pixels fed to PnP per keyframe.
    pub pnp_points: usize,
}

impl Default for AlignSpec {
    fn default() -> Self {
        AlignSpec {
            iterations: 200,
            step: 0.01,
            ransac: RansacSpec::default(),
            pnp_points: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeAlignment {
    pub keyframes: Vec<u32>,
    /// World pointmap per keyframe, row-major.
    pub pointmaps: Vec<Vec<Vector3<f64>>>,
    /// Highest incident prior confidence per keyframe pixel.
    pub confidence: Vec<Vec<f64>>,
    /// Similarity taking each edge's pair frame into the world frame.
    pub edges: Vec<((u32, u32), SimTransform)>,
    /// World-to-camera pose of each keyframe; the first is the identity.
    pub poses: Vec<Pose>,
    /// Objective before the first step and after every iteration.
    pub objective: Vec<f64>,
}

impl KeyframeAlignment {
    fn slot(&self, keyframe: u32) -> Option<usize> {
        self.keyframes.iter().position(|&k| k == keyframe)
    }

    pub fn pose(&self, keyframe: u32) -> Option<Pose> {
        self.slot(keyframe).map(|i| self.poses[i])
    }

    /// The keyframe's world pointmap in its own camera frame.
    pub fn local_pointmap(&self, keyframe: u32) -> Option<Vec<Vector3<f64>>> {
        let i = self.slot(keyframe)?;
        let pose = self.poses[i];
        Some(self.pointmaps[i].iter().map(|p| pose.transform_point(p)).collect())
    }

    /// Transform from keyframe `a`'s camera frame to keyframe `b`'s.
    pub fn relative(&self, a: u32, b: u32) -> Option<SimTransform> {
        let (pa, pb) = (self.pose(a)?, self.pose(b)?);
        Some(SimTransform::from_pose(pb.compose(&pa.inverse())))
    }

    /// Transforms between consecutive keyframes.
    pub fn fragment_transforms(&self) -> Vec<SimTransform> {
        self.keyframes
            .windows(2)
            .map(|w| self.relative(w[0], w[1]).expect("both keyframes present"))
            .collect()
    }
}

struct EdgeData {
    nodes: (usize, usize),
    pts: [Vec<Vector3<f64>>; 2],
    conf: [Vec<f64>; 2],
}

fn to_vec3(buf: &[f32]) -> Vec<Vector3<f64>> {
    buf.chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect()
}

#[derive(Clone)]
struct EdgeParam {
    rot: nalgebra::UnitQuaternion<f64>,
    t: Vector3<f64>,
    log_s: f64,
}

impl EdgeParam {
    fn from_sim(s: &SimTransform) -> Self {
        EdgeParam {
            rot: *s.pose.rotation(),
            t: *s.pose.translation(),
            log_s: s.scale.ln(),
        }
    }

    fn to_sim(&self) -> SimTransform {
        SimTransform {
            pose: Pose::new(self.rot, self.t),
            scale: self.log_s.exp(),
        }
    }
}

fn objective(
    edges: &[EdgeData],
    params: &[EdgeParam],
    world: &[Vec<Vector3<f64>>],
    mut grad: Option<(&mut [Vec<Vector3<f64>>], &mut [[f64; 7]])>,
) -> f64 {
    let mut total = 0.0;
    for (e, (data, p)) in edges.iter().zip(params).enumerate() {
        let s = p.log_s.exp();
        let rm = p.rot.to_rotation_matrix();
        let mut ge = [0.0; 7];
        for side in 0..2 {
            let node = if side == 0 { data.nodes.0 } else { data.nodes.1 };
            let target = &world[node];
            for (i, x) in data.pts[side].iter().enumerate() {
                let w = data.conf[side][i];
                if w == 0.0 {
                    continue;
                }
                let y = (rm * x) * s;
                let r = target[i] - y - p.t;
                let norm = r.norm();
                total += w * norm;
                if let Some((gw, _)) = grad.as_mut() {
                    if norm > 0.0 {
                        let g = r * (w / norm);
                        gw[node][i] += g;
                        ge[0] -= g.x;
                        ge[1] -= g.y;
                        ge[2] -= g.z;
                        let c = y.cross(&g);
                        ge[3] -= c.x;
                        ge[4] -= c.y;
                        ge[5] -= c.z;
                        ge[6] -= g.dot(&y);
                    }
                }
            }
        }
        if let Some((_, gp)) = grad.as_mut() {
            gp[e] = ge;
        }
    }
    total
}

fn retracted(
    params: &[EdgeParam],
    world: &[Vec<Vector3<f64>>],
    dir_world: &[Vec<Vector3<f64>>],
    dir_edge: &[[f64; 7]],
    alpha: f64,
) -> (Vec<EdgeParam>, Vec<Vec<Vector3<f64>>>) {
    let w = world
        .iter()
        .zip(dir_world)
        .map(|(p, d)| p.iter().zip(d).map(|(a, b)| a + b * alpha).collect())
        .collect();
    let e = params
        .iter()
        .zip(dir_edge)
        .enumerate()
        .map(|(i, (p, d))| {
            if i == 0 {
                // gauge edge stays at the identity
                return p.clone();
            }
            EdgeParam {
                rot: exp_so3(&(Vector3::new(d[3], d[4], d[5]) * alpha)) * p.rot,
                t: p.t + Vector3::new(d[0], d[1], d[2]) * alpha,
                log_s: p.log_s + d[6] * alpha,
            }
        })
        .collect();
    (e, w)
}

/// Prim-style initialization: grow from keyframe 1 along the most confident
/// edges, fitting each new edge's similarity in closed form.
fn initialize(
    m: usize,
    edges: &[EdgeData],
    graph: &KeyframeGraph,
) -> Result<(Vec<Option<SimTransform>>, Vec<Vec<Vector3<f64>>>), RegistrationError> {
    let mut sims: Vec<Option<SimTransform>> = vec![None; edges.len()];
    let mut world: Vec<Option<Vec<Vector3<f64>>>> = vec![None; m];
    world[0] = Some(edges[0].pts[0].clone());
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (e, d) in edges.iter().enumerate() {
            let (a, b) = d.nodes;
            let side = match (world[a].is_some(), world[b].is_some()) {
                (true, false) => 0,
                (false, true) => 1,
                _ => continue,
            };
            let weight: f64 = d.conf[side].iter().sum();
            if best.map_or(true, |(bw, _, _)| weight > bw) {
                best = Some((weight, e, side));
            }
        }
        let Some((_, e, side)) = best else { break };
        let d = &edges[e];
        let placed = if side == 0 { d.nodes.0 } else { d.nodes.1 };
        let other = if side == 0 { d.nodes.1 } else { d.nodes.0 };
        let sim = if e == 0 {
            SimTransform::identity()
        } else {
            align_similarity(
                &d.pts[side],
                world[placed].as_ref().unwrap(),
                Some(&d.conf[side]),
            )
            .ok_or_else(|| RegistrationError::Numerical(format!("degenerate edge {e}")))?
        };
        world[other] = Some(d.pts[1 - side].iter().map(|p| sim.apply(p)).collect());
        sims[e] = Some(sim);
    }
    if let Some(i) = world.iter().position(Option::is_none) {
        return Err(RegistrationError::DisconnectedGraph(graph.nodes[i]));
    }
    let world: Vec<Vec<Vector3<f64>>> = world.into_iter().map(Option::unwrap).collect();
    for (e, d) in edges.iter().enumerate() {
        if sims[e].is_some() {
            continue;
        }
        if e == 0 {
            sims[e] = Some(SimTransform::identity());
            continue;
        }
        let src: Vec<_> = d.pts[0].iter().chain(&d.pts[1]).copied().collect();
        let dst: Vec<_> = world[d.nodes.0].iter().chain(&world[d.nodes.1]).copied().collect();
        let w: Vec<_> = d.conf[0].iter().chain(&d.conf[1]).copied().collect();
        sims[e] = Some(
            align_similarity(&src, &dst, Some(&w))
                .ok_or_else(|| RegistrationError::Numerical(format!("degenerate edge {e}")))?,
        );
    }
    Ok((sims, world))
}

fn keyframe_pose(
    world: &[Vector3<f64>],
    conf: &[f64],
    k: &CameraIntrinsics,
    spec: &AlignSpec,
    seed: u64,
) -> Result<Pose, RegistrationError> {
    let good: Vec<usize> = (0..world.len()).filter(|&i| conf[i] >= 0.5).collect();
    let stride = good.len().div_ceil(spec.pnp_points.max(6)).max(1);
    let picked: Vec<usize> = good.into_iter().step_by(stride).collect();
    let pts: Vec<_> = picked.iter().map(|&i| world[i]).collect();
    let pxs: Vec<_> = picked
        .iter()
        .map(|&i| Vector2::new((i % k.width) as f64, (i / k.width) as f64))
        .collect();
    let ransac = RansacSpec {
        seed,
        ..spec.ransac
    };
    Ok(pnp_ransac_pose(&pts, &pxs, k, &ransac)?.pose)
}

pub fn global_keyframe_alignment(
    graph: &KeyframeGraph,
    bundle: &PriorBundle,
    spec: &AlignSpec,
) -> Result<KeyframeAlignment, RegistrationError> {
    let m = graph.nodes.len();
    if m == 0 {
        return Err(RegistrationError::TooFewFrames(0));
    }
    let k = bundle.intrinsics;
    if graph.edges.is_empty() {
        // a lone keyframe takes its geometry from its first intra-fragment pair
        let key = graph.nodes[0];
        let pair = bundle
            .pairs()
            .find(|p| p.view_a == key)
            .ok_or(RegistrationError::MissingPair(key, key + 1))?;
        return Ok(KeyframeAlignment {
            keyframes: graph.nodes.clone(),
            pointmaps: vec![to_vec3(&pair.pointmap_a)],
            confidence: vec![pair.confidence_a.iter().map(|&c| c as f64).collect()],
            edges: Vec::new(),
            poses: vec![Pose::identity()],
            objective: Vec::new(),
        });
    }

    let mut edges = Vec::with_capacity(graph.edges.len());
    for &(i, j) in &graph.edges {
        let (a, b) = graph.edge_frames((i, j));
        let pair = bundle.get(a, b).ok_or(RegistrationError::MissingPair(a, b))?;
        let conv = |c: &[f32]| c.iter().map(|&v| v as f64).collect::<Vec<_>>();
        edges.push(EdgeData {
            nodes: (i - 1, j - 1),
            pts: [to_vec3(&pair.pointmap_a), to_vec3(&pair.pointmap_b)],
            conf: [conv(&pair.confidence_a), conv(&pair.confidence_b)],
        });
    }
    let n = k.pixel_count();

    let (sims, prim_world) = initialize(m, &edges, graph)?;
    let mut params: Vec<EdgeParam> = sims.iter().map(|s| EdgeParam::from_sim(&s.unwrap())).collect();

    // confidence-weighted mean of every incident edge's prediction
    let mut acc = vec![vec![Vector3::zeros(); n]; m];
    let mut wsum = vec![vec![0.0; n]; m];
    let mut confidence = vec![vec![0.0f64; n]; m];
    for (d, p) in edges.iter().zip(&params) {
        let sim = p.to_sim();
        for side in 0..2 {
            let node = if side == 0 { d.nodes.0 } else { d.nodes.1 };
            for i in 0..n {
                let w = d.conf[side][i];
                acc[node][i] += sim.apply(&d.pts[side][i]) * w;
                wsum[node][i] += w;
                confidence[node][i] = confidence[node][i].max(w);
            }
        }
    }
    let mut world: Vec<Vec<Vector3<f64>>> = (0..m)
        .map(|v| {
            (0..n)
                .map(|i| {
                    if wsum[v][i] > 0.0 {
                        acc[v][i] / wsum[v][i]
                    } else {
                        prim_world[v][i]
                    }
                })
                .collect()
        })
        .collect();

    let n_world = 3 * m * n;
    let mut adam = Adam::new(n_world + 7 * edges.len(), spec.step);
    let mut gw = vec![vec![Vector3::zeros(); n]; m];
    let mut gp = vec![[0.0; 7]; edges.len()];
    let mut flat = vec![0.0; n_world + 7 * edges.len()];
    let mut history = Vec::with_capacity(spec.iterations + 1);
    let mut f0 = objective(&edges, &params, &world, None);
    history.push(f0);
    for _ in 0..spec.iterations {
        for g in gw.iter_mut() {
            g.iter_mut().for_each(|v| *v = Vector3::zeros());
        }
        objective(&edges, &params, &world, Some((&mut gw, &mut gp)));
        gp[0] = [0.0; 7];
        for (v, g) in gw.iter().enumerate() {
            for (i, x) in g.iter().enumerate() {
                let o = 3 * (v * n + i);
                flat[o..o + 3].copy_from_slice(x.as_slice());
            }
        }
        for (e, g) in gp.iter().enumerate() {
            flat[n_world + 7 * e..n_world + 7 * e + 7].copy_from_slice(g);
        }
        let dir = adam.direction(&flat);
        let dir_world: Vec<Vec<Vector3<f64>>> = (0..m)
            .map(|v| {
                (0..n)
                    .map(|i| {
                        let o = 3 * (v * n + i);
                        Vector3::new(dir[o], dir[o + 1], dir[o + 2])
                    })
                    .collect()
            })
            .collect();
        let dir_edge: Vec<[f64; 7]> = (0..edges.len())
            .map(|e| dir[n_world + 7 * e..n_world + 7 * e + 7].try_into().unwrap())
            .collect();
        let accepted = monotone_step(f0, 8, |alpha| {
            let (p, w) = retracted(&params, &world, &dir_world, &dir_edge, alpha);
            objective(&edges, &p, &w, None)
        });
        if let Some((alpha, f)) = accepted {
            let (p, w) = retracted(&params, &world, &dir_world, &dir_edge, alpha);
            params = p;
            world = w;
            f0 = f;
        }
        history.push(f0);
    }

    let mut poses = vec![Pose::identity()];
    for v in 1..m {
        let seed = spec.ransac.seed ^ (graph.nodes[v] as u64).wrapping_mul(0x9e37_79b9);
        poses.push(keyframe_pose(&world[v], &confidence[v], &k, spec, seed)?);
    }
    Ok(KeyframeAlignment {
        keyframes: graph.nodes.clone(),
        pointmaps: world,
        confidence,
        edges: graph
            .edges
            .iter()
            .zip(&params)
            .map(|(&e, p)| (graph.edge_frames(e), p.to_sim()))
            .collect(),
        poses,
        objective: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{generate_synthetic, NoiseSpec, SyntheticScene};

    #[test]
    fn single_edge_identical_pointmaps() {
        let scene = SyntheticScene::desk(3, 16, 0);
        let mut out = generate_synthetic(&scene, &[(1, 2)]).unwrap();
        let mut pair = out.bundle.get(1, 2).unwrap().clone();
        pair.pointmap_b = pair.pointmap_a.clone();
        pair.confidence_b = pair.confidence_a.clone();
        out.bundle = PriorBundle::new(scene.intrinsics);
        out.bundle.insert(pair).unwrap();
        let graph = KeyframeGraph::new(vec![1, 2]);
        let spec = AlignSpec {
            iterations: 20,
            ..AlignSpec::default()
        };
        let a = global_keyframe_alignment(&graph, &out.bundle, &spec).unwrap();
        assert!(a.edges[0].1.is_identity());
        assert!(*a.objective.last().unwrap() < 1e-10);
    }

    #[test]
    fn objective_never_increases_under_noise() {
        let scene = SyntheticScene::desk(9, 24, 1).with_noise(NoiseSpec::moderate(9.0));
        let graph = KeyframeGraph::new(vec![1, 3, 5, 7, 9]);
        let pairs: Vec<_> = graph.edges.iter().map(|&e| graph.edge_frames(e)).collect();
        let out = generate_synthetic(&scene, &pairs).unwrap();
        let spec = AlignSpec {
            iterations: 40,
            ..AlignSpec::default()
        };
        let a = global_keyframe_alignment(&graph, &out.bundle, &spec).unwrap();
        assert!(a.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.objective.last().unwrap() < &a.objective[0]);
    }

    #[test]
    fn zero_confidence_pixels_do_not_matter() {
        let scene = SyntheticScene::desk(5, 16, 4).with_noise(NoiseSpec::moderate(9.0));
        let graph = KeyframeGraph::new(vec![1, 3, 5]);
        let pairs: Vec<_> = graph.edges.iter().map(|&e| graph.edge_frames(e)).collect();
        let out = generate_synthetic(&scene, &pairs).unwrap();
        let spec = AlignSpec {
            iterations: 15,
            ..AlignSpec::default()
        };
        let mut pair = out.bundle.get(3, 5).unwrap().clone();
        pair.confidence_a[37] = 0.0;
        let mut perturbed = pair.clone();
        perturbed.pointmap_a[3 * 37] += 5.0;
        let rebuild = |p: crate::prior::PairwisePrior| {
            let mut b = PriorBundle::new(out.bundle.intrinsics);
            for q in out.bundle.pairs() {
                b.insert(if q.key() == (3, 5) { p.clone() } else { q.clone() }).unwrap();
            }
            b
        };
        let a = global_keyframe_alignment(&graph, &rebuild(pair), &spec).unwrap();
        let b = global_keyframe_alignment(&graph, &rebuild(perturbed), &spec).unwrap();
        assert_eq!(a.objective.last(), b.objective.last());
    }

    #[test]
    fn disconnected_keyframe_is_reported() {
        let scene = SyntheticScene::desk(5, 16, 0);
        let out = generate_synthetic(&scene, &[(1, 3), (3, 5)]).unwrap();
        let graph = KeyframeGraph {
            nodes: vec![1, 3, 5, 7],
            edges: vec![(1, 2), (2, 3)],
        };
        let r = global_keyframe_alignment(&graph, &out.bundle, &AlignSpec::default());
        assert_eq!(r, Err(RegistrationError::DisconnectedGraph(7)));
    }
}
