//! Image and trajectory quality metrics.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{align_similarity, Trajectory};
use crate::image::Image;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("trajectories cover different frames")]
    IndexMismatch,
    #[error("need at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("camera centres are degenerate")]
    Degenerate,
}

fn check(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on unit range; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn window(width: usize, height: usize) -> Vec<f64> {
    let mut size = SSIM_WINDOW.min(width).min(height);
    if size % 2 == 0 {
        size -= 1;
    }
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" correlation of a single-channel image.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + j];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + x + j] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, if requested, its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width, a.height);
    let k = window(w, h);
    let positions = (w + 1 - k.len()) * (h + 1 - k.len());
    let norm = 1.0 / (3 * positions) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; 3 * w * h]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter(&x, w, h, &k);
        let my = filter(&y, w, h, &k);
        let exx = filter(&prod(&x, &x), w, h, &k);
        let eyy = filter(&prod(&y, &y), w, h, &k);
        let exy = filter(&prod(&x, &y), w, h, &k);
        let mut g_mx = vec![0.0; positions];
        let mut g_xx = vec![0.0; positions];
        let mut g_xy = vec![0.0; positions];
        for i in 0..positions {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_ux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let d_sxx = -s / b2;
                let d_sxy = 2.0 * a1 / (b1 * b2);
                g_mx[i] = norm * (d_ux - 2.0 * ux * d_sxx - uy * d_sxy);
                g_xx[i] = norm * d_sxx;
                g_xy[i] = norm * d_sxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let a_mx = filter_adjoint(&g_mx, w, h, &k);
            let a_xx = filter_adjoint(&g_xx, w, h, &k);
            let a_xy = filter_adjoint(&g_xy, w, h, &k);
            for p in 0..w * h {
                g[3 * p + c] = a_mx[p] + 2.0 * x[p] * a_xx[p] + y[p] * a_xy[p];
            }
        }
    }
    (total * norm, grad)
}

/// Mean structural similarity over all window positions and channels,
/// Gaussian window of width 11 and sigma 1.5 (narrower for tiny images).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// [`ssim`] with its gradient with respect to `a`, interleaved like
/// [`Image::data`].
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>), MetricsError> {
    check(a, b)?;
    let (v, g) = ssim_impl(a, b, true);
    Ok((v, g.unwrap()))
}

pub const L1_WEIGHT: f64 = 0.8;

/// `0.8 * L1 + 0.2 * (1 - SSIM)` and its gradient with respect to
/// `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image) -> Result<(f64, Vec<f64>), MetricsError> {
    check(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    let (s, sg) = ssim_with_grad(rendered, target)?;
    let mut grad = vec![0.0; rendered.data.len()];
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = r - t;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i] = L1_WEIGHT * sign / n - (1.0 - L1_WEIGHT) * sg[i];
    }
    Ok((L1_WEIGHT * l1 / n + (1.0 - L1_WEIGHT) * (1.0 - s), grad))
}

/// Camera-centre residual of every frame after similarity-aligning
/// `estimated` onto `reference`.
pub fn aligned_residuals(
    estimated: &Trajectory,
    reference: &Trajectory,
) -> Result<Vec<f64>, MetricsError> {
    let ia: Vec<u32> = estimated.indices().collect();
    let ib: Vec<u32> = reference.indices().collect();
    if ia != ib {
        return Err(MetricsError::IndexMismatch);
    }
    if ia.len() < 3 {
        return Err(MetricsError::TooFewPoses(ia.len()));
    }
    let src = estimated.centers();
    let dst = reference.centers();
    let sim = align_similarity(&src, &dst, None).ok_or(MetricsError::Degenerate)?;
    Ok(src
        .iter()
        .zip(&dst)
        .map(|(s, d): (&Vector3<f64>, _)| (sim.apply(s) - d).norm())
        .collect())
}

/// Absolute trajectory error: RMSE of camera centres after 7-DoF alignment.
pub fn ate(estimated: &Trajectory, reference: &Trajectory) -> Result<f64, MetricsError> {
    let r = aligned_residuals(estimated, reference)?;
    Ok((r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, SimTransform};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..3 * w * h).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn psnr_examples() {
        let z = Image::filled(4, 4, 0.0);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert!((psnr(&z, &Image::filled(4, 4, 0.5)).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert_eq!(psnr(&z, &Image::filled(4, 4, 1.0)).unwrap(), 0.0);
        assert!(psnr(&z, &Image::filled(4, 5, 1.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = noise_image(1, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = noise_image(2, 16, 16);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        // constant images: zero variances leave only the luminance term
        let v = ssim(&Image::filled(16, 16, 0.0), &Image::filled(16, 16, 1.0)).unwrap();
        assert!((v - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = noise_image(3, 13, 12);
        let b = noise_image(4, 13, 12);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        for i in [0, 17, 100, 231, 3 * 13 * 12 - 1] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += 1e-5;
            m.data[i] -= 1e-5;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-7 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn photometric_loss_examples() {
        let z = Image::filled(16, 16, 0.0);
        let o = Image::filled(16, 16, 1.0);
        assert_eq!(photometric_loss(&o, &o).unwrap().0, 0.0);
        let (l, _) = photometric_loss(&z, &o).unwrap();
        let s = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((l - (0.8 + 0.2 * (1.0 - s))).abs() < 1e-12);
        let a = noise_image(5, 16, 16);
        let b = noise_image(6, 16, 16);
        let l1 = |x: &Image, y: &Image| {
            x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.data.len() as f64
        };
        let scale = |x: &Image, c: f64| Image::from_data(16, 16, x.data.iter().map(|v| v * c).collect());
        assert!((l1(&scale(&a, 0.5), &scale(&b, 0.5)) - 0.5 * l1(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let a = noise_image(7, 12, 12);
        let b = noise_image(8, 12, 12);
        let (_, g) = photometric_loss(&a, &b).unwrap();
        for i in [1, 50, 200, 431] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            let fd = (photometric_loss(&p, &b).unwrap().0 - photometric_loss(&m, &b).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-3 * fd.abs().max(1e-4), "{i}");
        }
    }

    fn square() -> Trajectory {
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        Trajectory::new(
            corners
                .iter()
                .enumerate()
                .map(|(i, (x, y))| {
                    (i as u32 + 1, Pose::from_center(UnitQuaternion::identity(), Vector3::new(*x, *y, 0.0)))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ate_examples() {
        let r = square();
        assert!(ate(&r, &r).unwrap() < 1e-12);
        let sim = SimTransform::new(
            Pose::new(UnitQuaternion::from_euler_angles(0.3, 1.0, -0.2), Vector3::new(3.0, -1.0, 2.0)),
            2.5,
        )
        .unwrap();
        let moved = Trajectory::new(
            r.entries()
                .iter()
                .map(|(i, p)| (*i, Pose::from_center(*p.rotation(), sim.apply(&p.center()))))
                .collect(),
        )
        .unwrap();
        assert!(ate(&moved, &r).unwrap() < 1e-9);
        assert_eq!(ate(&Trajectory::new(r.entries()[..2].to_vec()).unwrap(), &Trajectory::new(r.entries()[..2].to_vec()).unwrap()), Err(MetricsError::TooFewPoses(2)));
        assert_eq!(ate(&r, &Trajectory::new(r.entries()[..3].to_vec()).unwrap()), Err(MetricsError::IndexMismatch));
    }
}
