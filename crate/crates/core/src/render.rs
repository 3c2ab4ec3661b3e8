//! Software splat rasterizer with an exact reverse pass.
//!
//! Every Gaussian becomes a circular screen-space footprint of radius
//! `scale * fx / z`. Footprints are composited front to back in depth order
//! (ties broken by provenance, then list position). The falloff is
//! `exp(-q)` for `q = d^2 / (2 r^2)`, tapered smoothly to zero between `q = 4`
//! and `q = 4.5` (three screen radii), so the image is twice
//! continuously differentiable in every parameter.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::splat::{GaussianSet, Source, WordHash};

pub const MAX_ALPHA: f64 = 0.999;
/// Pixels whose transmittance falls below this stop accepting splats.
pub const MIN_TRANSMITTANCE: f64 = 1e-30;
pub const NEAR_PLANE: f64 = 1e-3;
const TAPER_START: f64 = 4.0;
const TAPER_END: f64 = 4.5;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("forward state does not match the Gaussian set, pose or camera")]
    StaleForwardState,
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientSize { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    index: usize,
    source: Source,
    cam: Vector3<f64>,
    u: f64,
    v: f64,
    r: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub color: Vec<f64>,
    /// Alpha-weighted expected camera depth; 0 where nothing contributes.
    pub depth: Vec<f64>,
    /// Accumulated opacity.
    pub confidence: Vec<f64>,
    splats: Vec<Splat>,
    /// Per pixel, one past the sorted position of the last contributor.
    last: Vec<u32>,
    /// Transmittance in front of each contribution, in visiting order.
    trans: Vec<f64>,
    fingerprint: u64,
}

impl RenderOutput {
    pub fn image(&self) -> Image {
        Image::from_data(self.width, self.height, self.color.clone())
    }

    /// Indices of the Gaussians that reached the image, in compositing order.
    pub fn visible(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.index).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub center: Vec<Vector3<f64>>,
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub scale: Vec<f64>,
    /// Left-perturbation tangent `(rho, phi)` of the world-to-camera pose.
    pub pose: [f64; 6],
}

impl RenderGradients {
    fn zeros(n: usize) -> Self {
        RenderGradients {
            center: vec![Vector3::zeros(); n],
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            scale: vec![0.0; n],
            pose: [0.0; 6],
        }
    }
}

fn state_fingerprint(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics) -> u64 {
    let mut h = WordHash::new(set.fingerprint());
    let q = pose.rotation().quaternion();
    let t = pose.translation();
    for v in [q.w, q.i, q.j, q.k, t.x, t.y, t.z, k.fx, k.fy, k.cx, k.cy] {
        h.write(v.to_bits());
    }
    h.write(k.width as u64);
    h.write(k.height as u64);
    h.finish()
}

/// Falloff and its derivative in `q`, given `e = exp(-q)`.
///
/// The exponential factors as a column term times a row term, so callers
/// pass the product in instead of paying for one `exp` per pixel.
#[inline]
fn falloff(q: f64, e: f64) -> (f64, f64) {
    if q <= TAPER_START {
        return (e, -e);
    }
    let u = (q - TAPER_START) / (TAPER_END - TAPER_START);
    let s = 1.0 - u * u * u * (10.0 - u * (15.0 - 6.0 * u));
    let ds = -30.0 * u * u * (1.0 - u) * (1.0 - u) / (TAPER_END - TAPER_START);
    (e * s, e * (ds - s))
}

impl Splat {
    /// `exp(-dx^2 / 2r^2)` for every column of the bounding box.
    fn column_factors(&self, inv2r2: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend((self.x0..=self.x1).map(|x| {
            let dx = x as f64 - self.u;
            (-dx * dx * inv2r2).exp()
        }));
    }

    /// Columns of row `y` inside the support, clipped to the bounding box.
    #[inline]
    fn row_span(&self, y: usize) -> Option<(usize, usize)> {
        let dy = y as f64 - self.v;
        let rem = 2.0 * TAPER_END * self.r * self.r - dy * dy;
        if rem < 0.0 {
            return None;
        }
        let half = rem.sqrt();
        let lo = (self.u - half).ceil().max(self.x0 as f64) as usize;
        let hi = (self.u + half).floor().min(self.x1 as f64);
        if hi < lo as f64 {
            return None;
        }
        Some((lo, hi as usize))
    }
}

fn project_splats(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics) -> Vec<Splat> {
    let rot = pose.rotation_matrix();
    let t = *pose.translation();
    let reach = (2.0 * TAPER_END).sqrt();
    let mut splats: Vec<Splat> = Vec::with_capacity(set.len());
    for (index, g) in set.gaussians.iter().enumerate() {
        let cam = rot * g.center + t;
        if cam.z <= NEAR_PLANE {
            continue;
        }
        let iz = 1.0 / cam.z;
        let u = k.fx * cam.x * iz + k.cx;
        let v = k.fy * cam.y * iz + k.cy;
        let r = g.scale * k.fx * iz;
        if !(r > 0.0 && r.is_finite()) {
            continue;
        }
        let ext = reach * r;
        let (lx, hx) = ((u - ext).ceil(), (u + ext).floor());
        let (ly, hy) = ((v - ext).ceil(), (v + ext).floor());
        if hx < 0.0 || hy < 0.0 || lx > (k.width - 1) as f64 || ly > (k.height - 1) as f64 {
            continue;
        }
        if lx > hx || ly > hy {
            continue;
        }
        splats.push(Splat {
            index,
            source: g.source,
            cam,
            u,
            v,
            r,
            x0: lx.max(0.0) as usize,
            x1: hx.min((k.width - 1) as f64) as usize,
            y0: ly.max(0.0) as usize,
            y1: hy.min((k.height - 1) as f64) as usize,
        });
    }
    // indices are unique, so the unstable sort is still deterministic
    splats.sort_unstable_by(|a, b| {
        a.cam
            .z
            .total_cmp(&b.cam.z)
            .then_with(|| a.source.cmp(&b.source))
            .then_with(|| a.index.cmp(&b.index))
    });
    splats
}

pub fn render(set: &GaussianSet, pose: &Pose, k: &CameraIntrinsics) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let n = w * h;
    let splats = project_splats(set, pose, k);
    let mut color = vec![0.0; 3 * n];
    let mut depth_acc = vec![0.0; n];
    let mut confidence = vec![0.0; n];
    let mut t = vec![1.0; n];
    let mut last = vec![0u32; n];
    let mut trans = Vec::with_capacity(32 * splats.len());
    let mut cols = Vec::new();
    for (pos, s) in splats.iter().enumerate() {
        let g = &set.gaussians[s.index];
        let inv2r2 = 0.5 / (s.r * s.r);
        s.column_factors(inv2r2, &mut cols);
        for y in s.y0..=s.y1 {
            let Some((xa, xb)) = s.row_span(y) else { continue };
            let dy = y as f64 - s.v;
            let ey = (-dy * dy * inv2r2).exp();
            let row = y * w;
            for x in xa..=xb {
                let dx = x as f64 - s.u;
                let q = (dx * dx + dy * dy) * inv2r2;
                if q >= TAPER_END {
                    continue;
                }
                let p = row + x;
                let tp = t[p];
                if tp < MIN_TRANSMITTANCE {
                    continue;
                }
                let alpha = (g.opacity * falloff(q, cols[x - s.x0] * ey).0).min(MAX_ALPHA);
                if alpha <= 0.0 {
                    continue;
                }
                let wgt = alpha * tp;
                color[3 * p] += wgt * g.color[0];
                color[3 * p + 1] += wgt * g.color[1];
                color[3 * p + 2] += wgt * g.color[2];
                depth_acc[p] += wgt * s.cam.z;
                confidence[p] += wgt;
                trans.push(tp);
                t[p] = tp * (1.0 - alpha);
                last[p] = pos as u32 + 1;
            }
        }
    }
    let depth = depth_acc
        .iter()
        .zip(&confidence)
        .map(|(d, c)| if *c > 0.0 { d / c } else { 0.0 })
        .collect();
    RenderOutput {
        width: w,
        height: h,
        color,
        depth,
        confidence,
        splats,
        last,
        trans,
        fingerprint: state_fingerprint(set, pose, k),
    }
}

/// Gradients of a scalar loss given its gradient with respect to the
/// rendered colors. Depth is not differentiated.
pub fn render_backward(
    set: &GaussianSet,
    pose: &Pose,
    k: &CameraIntrinsics,
    forward: &RenderOutput,
    grad_color: &[f64],
) -> Result<RenderGradients, RenderError> {
    if forward.fingerprint != state_fingerprint(set, pose, k) {
        return Err(RenderError::StaleForwardState);
    }
    let (w, h) = (k.width, k.height);
    let n = w * h;
    if grad_color.len() != 3 * n {
        return Err(RenderError::GradientSize {
            got: grad_color.len(),
            expected: 3 * n,
        });
    }
    let mut out = RenderGradients::zeros(set.len());
    // colour composited behind the current splat, from transmittance 1
    let mut behind = vec![0.0; 3 * n];
    let mut cursor = forward.trans.len();
    let mut gphi = Vector3::zeros();
    let mut grho = Vector3::zeros();
    let mut cols = Vec::new();
    for (pos, s) in forward.splats.iter().enumerate().rev() {
        let g = &set.gaussians[s.index];
        let inv_r2 = 1.0 / (s.r * s.r);
        let inv2r2 = 0.5 * inv_r2;
        let (mut gu, mut gv, mut gr, mut go) = (0.0, 0.0, 0.0, 0.0);
        let mut gc = [0.0; 3];
        s.column_factors(inv2r2, &mut cols);
        for y in (s.y0..=s.y1).rev() {
            let Some((xa, xb)) = s.row_span(y) else { continue };
            let dy = y as f64 - s.v;
            let ey = (-dy * dy * inv2r2).exp();
            let row = y * w;
            for x in (xa..=xb).rev() {
                let p = row + x;
                if pos as u32 >= forward.last[p] {
                    continue;
                }
                let dx = x as f64 - s.u;
                let d2 = dx * dx + dy * dy;
                let q = d2 * inv2r2;
                if q >= TAPER_END {
                    continue;
                }
                let (phi, dphi) = falloff(q, cols[x - s.x0] * ey);
                let raw = g.opacity * phi;
                let alpha = raw.min(MAX_ALPHA);
                if alpha <= 0.0 {
                    continue;
                }
                cursor -= 1;
                let tp = forward.trans[cursor];
                let gcol = &grad_color[3 * p..3 * p + 3];
                let b = &mut behind[3 * p..3 * p + 3];
                let wgt = alpha * tp;
                let mut dalpha = 0.0;
                for c in 0..3 {
                    gc[c] += wgt * gcol[c];
                    dalpha += (g.color[c] - b[c]) * gcol[c];
                    b[c] = alpha * g.color[c] + (1.0 - alpha) * b[c];
                }
                dalpha *= tp;
                if raw < MAX_ALPHA {
                    go += dalpha * phi;
                    let dq = dalpha * g.opacity * dphi;
                    gu -= dq * dx * inv_r2;
                    gv -= dq * dy * inv_r2;
                    gr -= dq * d2 * inv_r2 / s.r;
                }
            }
        }
        let i = s.index;
        out.color[i] = gc;
        out.opacity[i] = go;
        let iz = 1.0 / s.cam.z;
        out.scale[i] = gr * k.fx * iz;
        let gcam = Vector3::new(
            gu * k.fx * iz,
            gv * k.fy * iz,
            -(gu * k.fx * s.cam.x + gv * k.fy * s.cam.y) * iz * iz - gr * s.r * iz,
        );
        out.center[i] = pose.rotation().inverse() * gcam;
        grho += gcam;
        gphi += s.cam.cross(&gcam);
    }
    debug_assert_eq!(cursor, 0);
    out.pose = [grho.x, grho.y, grho.z, gphi.x, gphi.y, gphi.z];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::{Gaussian, Source};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize) -> CameraIntrinsics {
        let f = size as f64;
        CameraIntrinsics::new(f, f, f / 2.0, f / 2.0, size, size).unwrap()
    }

    fn splat(center: Vector3<f64>, opacity: f64, scale: f64, pixel: u32) -> Gaussian {
        Gaussian {
            center,
            color: [0.2, 0.5, 0.9],
            opacity,
            scale,
            source: Source {
                fragment: 1,
                frame: 1,
                pixel,
            },
        }
    }

    #[test]
    fn empty_set_renders_zero() {
        let out = render(&GaussianSet::default(), &Pose::identity(), &cam(8));
        assert!(out.confidence.iter().all(|c| *c == 0.0));
        assert!(out.depth.iter().all(|d| *d == 0.0));
        assert!(out.color.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn single_splat_on_pixel_center() {
        let k = cam(8);
        // projects to pixel (4, 4) exactly
        let set = GaussianSet::new(vec![splat(Vector3::new(0.0, 0.0, 2.0), 0.8, 0.2, 0)], (1, 1));
        let out = render(&set, &Pose::identity(), &k);
        assert!((out.confidence[4 * 8 + 4] - 0.8).abs() < 1e-15);
        assert!((out.depth[4 * 8 + 4] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_splats_compose() {
        let k = cam(8);
        let c = Vector3::new(0.0, 0.0, 2.0);
        let set = GaussianSet::new(vec![splat(c, 0.3, 0.2, 0), splat(c, 0.6, 0.2, 1)], (1, 1));
        let out = render(&set, &Pose::identity(), &k);
        assert!((out.confidence[36] - (0.3 + 0.7 * 0.6)).abs() < 1e-9);
    }

    #[test]
    fn far_outside_has_zero_gradient() {
        let k = cam(16);
        let set = GaussianSet::new(
            vec![
                splat(Vector3::new(0.0, 0.0, 2.0), 0.5, 0.1, 0),
                splat(Vector3::new(40.0, 0.0, 2.0), 0.5, 0.1, 1),
            ],
            (1, 1),
        );
        let out = render(&set, &Pose::identity(), &k);
        let g = render_backward(&set, &Pose::identity(), &k, &out, &vec![1.0; 3 * 256]).unwrap();
        assert_eq!(g.center[1], Vector3::zeros());
        assert_eq!(g.opacity[1], 0.0);
        assert_eq!(g.scale[1], 0.0);
        assert_eq!(g.color[1], [0.0; 3]);
        assert!(g.opacity[0] > 0.0);
    }

    #[test]
    fn stale_state_is_detected() {
        let k = cam(8);
        let mut set = GaussianSet::new(vec![splat(Vector3::new(0.0, 0.0, 2.0), 0.5, 0.1, 0)], (1, 1));
        let out = render(&set, &Pose::identity(), &k);
        set.gaussians[0].opacity = 0.6;
        assert_eq!(
            render_backward(&set, &Pose::identity(), &k, &out, &vec![0.0; 192]),
            Err(RenderError::StaleForwardState)
        );
        let moved = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 0.1));
        set.gaussians[0].opacity = 0.5;
        assert_eq!(
            render_backward(&set, &moved, &k, &out, &vec![0.0; 192]),
            Err(RenderError::StaleForwardState)
        );
    }

    #[test]
    fn gradient_is_linear_in_loss_gradient() {
        let k = cam(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = GaussianSet::new(
            (0..6)
                .map(|i| {
                    splat(
                        Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 2.0 + 0.1 * i as f64),
                        0.5,
                        0.1,
                        i,
                    )
                })
                .collect(),
            (1, 1),
        );
        let out = render(&set, &Pose::identity(), &k);
        let gl: Vec<f64> = (0..768).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g1 = render_backward(&set, &Pose::identity(), &k, &out, &gl).unwrap();
        let g2 = render_backward(&set, &Pose::identity(), &k, &out, &gl.iter().map(|v| 2.0 * v).collect::<Vec<_>>()).unwrap();
        for i in 0..6 {
            assert!((g2.opacity[i] - 2.0 * g1.opacity[i]).abs() <= 1e-12 * g1.opacity[i].abs().max(1.0));
            assert!((g2.center[i] - 2.0 * g1.center[i]).norm() <= 1e-12 * g1.center[i].norm().max(1.0));
        }
    }
}
