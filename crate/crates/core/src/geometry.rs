//! Pinhole cameras, rigid and similarity transforms, and the trajectory
//! text format.
//!
//! Conventions: camera frame is +Z forward, +X right, +Y down. A [`Pose`]
//! maps world coordinates into the camera frame. Integer pixel coordinates
//! address pixel centers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("similarity scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("trajectory: {0}")]
    Trajectory(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-frame ray direction (z = 1) through a pixel.
    pub fn ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Projects a camera-frame point, without the depth check.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }
}

/// Rigid transform mapping world coordinates to camera coordinates.
///
/// The rotation quaternion is kept unit-norm with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if q.w < 0.0 { -q } else { q };
    UnitQuaternion::new_normalize(q)
}

/// Rotation by the axis-angle vector `omega`.
pub fn exp_so3(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*omega)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: canonical(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: canonical(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Pose::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Pose of a camera at `center` whose world-to-camera rotation is `rotation`.
    pub fn from_center(rotation: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        let t = -(rotation * center);
        Pose::new(rotation, t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: canonical((self.rotation * other.rotation).into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: canonical(inv.into_inner()),
            translation: -(inv * self.translation),
        }
    }

    /// Left perturbation by the tangent vector `(rho, phi)`:
    /// `x_cam' = Exp(phi) * x_cam + rho`.
    pub fn retract(&self, xi: &[f64; 6]) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        let dr = exp_so3(&phi);
        Pose {
            rotation: canonical((dr * self.rotation).into_inner()),
            translation: dr * self.translation + rho,
        }
    }

    /// Geodesic rotation distance in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// `x ↦ scale · R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTransform {
    pub pose: Pose,
    pub scale: f64,
}

impl Default for SimTransform {
    fn default() -> Self {
        SimTransform::identity()
    }
}

impl SimTransform {
    pub fn identity() -> Self {
        SimTransform {
            pose: Pose::identity(),
            scale: 1.0,
        }
    }

    pub fn new(pose: Pose, scale: f64) -> Result<Self, GeometryError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(SimTransform { pose, scale })
    }

    pub fn from_pose(pose: Pose) -> Self {
        SimTransform { pose, scale: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0
            && self.pose.translation == Vector3::zeros()
            && self.pose.rotation.into_inner() == Quaternion::identity()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * (p * self.scale) + self.pose.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimTransform) -> SimTransform {
        let r = self.pose.rotation * other.pose.rotation;
        let t = self.pose.rotation * (other.pose.translation * self.scale) + self.pose.translation;
        SimTransform {
            pose: Pose {
                rotation: canonical(r.into_inner()),
                translation: t,
            },
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> SimTransform {
        let inv = self.pose.rotation.inverse();
        SimTransform {
            pose: Pose {
                rotation: canonical(inv.into_inner()),
                translation: -(inv * self.pose.translation) / self.scale,
            },
            scale: 1.0 / self.scale,
        }
    }
}

/// Projects a world point into the image. Returns the pixel and the
/// camera-frame depth.
pub fn project(
    point: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = pose.transform_point(point);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    Ok((k.project_camera(&pc), pc.z))
}

pub fn unproject(
    pixel: &Vector2<f64>,
    depth: f64,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let pc = k.ray(*pixel) * depth;
    Ok(pose.inverse().transform_point(&pc))
}

/// Ordered per-frame camera poses. Frame indices are 1-based and strictly
/// increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(u32, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(u32, Pose)>) -> Result<Self, GeometryError> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(GeometryError::Trajectory(format!(
                    "frame indices not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        Ok(Trajectory { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, Pose)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn get(&self, frame: u32) -> Option<&Pose> {
        self.entries
            .binary_search_by_key(&frame, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.center()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in &self.entries {
            let t = p.translation();
            let q = p.rotation().quaternion();
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                i,
                fmt_sig9(t.x),
                fmt_sig9(t.y),
                fmt_sig9(t.z),
                fmt_sig9(q.i),
                fmt_sig9(q.j),
                fmt_sig9(q.k),
                fmt_sig9(q.w)
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |m: &str| GeometryError::Trajectory(format!("line {}: {m}", lineno + 1));
            if fields.len() != 8 {
                return Err(err("expected 8 fields"));
            }
            let index: u32 = fields[0].parse().map_err(|_| err("bad frame index"))?;
            let mut v = [0.0f64; 7];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| err("bad number"))?;
            }
            let pose = Pose::from_quaternion(v[6], v[3], v[4], v[5], Vector3::new(v[0], v[1], v[2]));
            entries.push((index, pose));
        }
        Trajectory::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Trajectory::parse(&text)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> GeometryError {
    GeometryError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Formats with 9 significant digits in scientific notation.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{:.8e}", x)
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation.quaternion();
        write!(
            f,
            "t=({:.6}, {:.6}, {:.6}) q=({:.6}, {:.6}, {:.6}, {:.6})",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

/// Closed-form weighted similarity alignment: finds `(s, R, t)` minimizing
/// `Σ w_i ‖dst_i − (s R src_i + t)‖²`.
pub fn align_similarity(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Option<SimTransform> {
    align_impl(src, dst, weights, true)
}

/// Rigid variant of [`align_similarity`] (scale fixed at 1).
pub fn align_rigid(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Option<SimTransform> {
    align_impl(src, dst, weights, false)
}

fn align_impl(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Option<SimTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        mu_s += src[i] * w(i);
        mu_d += dst[i] * w(i);
    }
    mu_s /= total;
    mu_d /= total;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..src.len() {
        let a = src[i] - mu_s;
        let b = dst[i] - mu_d;
        cov += b * a.transpose() * w(i);
        var_s += a.norm_squared() * w(i);
    }
    cov /= total;
    var_s /= total;
    let svd = cov.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        if !(var_s > 0.0) {
            return None;
        }
        let sv = svd.singular_values;
        (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return None;
    }
    let rot = Pose::from_matrix(&r, Vector3::zeros());
    let t = mu_d - rot.rotation() * (mu_s * scale);
    Some(SimTransform {
        pose: Pose::new(*rot.rotation(), t),
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn centered() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 250.0, 250.0, 500, 500).unwrap()
    }

    fn rot_z(a: f64) -> Pose {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a),
            Vector3::zeros(),
        )
    }

    #[test]
    fn compose_identities() {
        let id = Pose::identity();
        assert_eq!(id.compose(&id), id);
        let t = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let e = t.compose(&t.inverse());
        assert!(e.rotation_angle_to(&id) < 1e-9);
        assert!(e.translation().norm() < 1e-9);
    }

    #[test]
    fn quarter_turns_make_half_turn() {
        let q = rot_z(FRAC_PI_2);
        let h = q.compose(&q);
        assert!(h.rotation_angle_to(&rot_z(std::f64::consts::PI)) < 1e-12);
        assert!(h.rotation().quaternion().w >= 0.0);
    }

    #[test]
    fn project_examples() {
        let k = centered();
        let (px, d) = project(&Vector3::new(0.0, 0.0, 2.0), &Pose::identity(), &k).unwrap();
        assert_eq!((px.x, px.y, d), (250.0, 250.0, 2.0));
        let (px, _) = project(&Vector3::new(1.0, 0.0, 2.0), &Pose::identity(), &k).unwrap();
        assert_eq!((px.x, px.y), (500.0, 250.0));
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &Pose::identity(), &k),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn unproject_examples() {
        let k = centered();
        let p = unproject(&Vector2::new(250.0, 250.0), 2.0, &Pose::identity(), &k).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(
            unproject(&Vector2::new(1.0, 1.0), 0.0, &Pose::identity(), &k),
            Err(GeometryError::NonPositiveDepth(0.0))
        );
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn trajectory_text_round_trip() {
        let traj = Trajectory::new(vec![
            (1, Pose::identity()),
            (
                2,
                Pose::new(
                    UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
                    Vector3::new(0.25, -1.5, 3.0),
                ),
            ),
        ])
        .unwrap();
        let text = traj.to_text();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("1 0 0 0 0 0 0 1.00000000e0\n"));
        let back = Trajectory::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert!(Trajectory::new(vec![(2, Pose::identity()), (1, Pose::identity())]).is_err());
    }

    #[test]
    fn similarity_alignment_recovers_transform() {
        let truth = SimTransform::new(
            Pose::new(
                UnitQuaternion::from_euler_angles(0.4, -0.3, 0.9),
                Vector3::new(0.3, 2.0, -1.0),
            ),
            1.7,
        )
        .unwrap();
        let src: Vec<_> = (0..10)
            .map(|i| {
                let f = i as f64;
                Vector3::new(f.sin(), (2.0 * f).cos(), 0.3 * f)
            })
            .collect();
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let est = align_similarity(&src, &dst, None).unwrap();
        assert!((est.scale - 1.7).abs() < 1e-10);
        assert!(est.pose.rotation_angle_to(&truth.pose) < 1e-10);
        assert!((est.pose.translation() - truth.pose.translation()).norm() < 1e-9);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -3.0..3.0f64,
            -3.0..3.0f64,
            -3.0..3.0f64,
            -2.0..2.0f64,
            -2.0..2.0f64,
            -2.0..2.0f64,
        )
            .prop_map(|(a, b, c, x, y, z)| {
                Pose::new(UnitQuaternion::from_euler_angles(a, b, c), Vector3::new(x, y, z))
            })
    }

    proptest! {
        #[test]
        fn project_unproject_round_trip(
            pose in arb_pose(),
            u in 0.0..500.0f64,
            v in 0.0..500.0f64,
            depth in 0.01..1e4f64,
        ) {
            let k = centered();
            let px = Vector2::new(u, v);
            let p = unproject(&px, depth, &pose, &k).unwrap();
            let (back, d) = project(&p, &pose, &k).unwrap();
            prop_assert!((back - px).norm() < 1e-6);
            prop_assert!((d - depth).abs() < 1e-6 * depth.max(1.0));
        }

        #[test]
        fn inverse_is_involution(pose in arb_pose()) {
            let back = pose.inverse().inverse();
            prop_assert!(back.rotation_angle_to(&pose) < 1e-9);
            prop_assert!((back.translation() - pose.translation()).norm() < 1e-9);
            prop_assert!((pose.rotation().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-9);
            prop_assert!((l.translation() - r.translation()).norm() < 1e-9);
        }

        #[test]
        fn quaternion_matrix_round_trip(pose in arb_pose()) {
            let back = Pose::from_matrix(&pose.rotation_matrix(), *pose.translation());
            prop_assert!(back.rotation_angle_to(&pose) < 1e-9);
            prop_assert!(back.rotation().quaternion().w >= 0.0);
        }
    }
}
