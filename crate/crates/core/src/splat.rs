//! Isotropic Gaussian splats with per-pixel provenance, and the `VLGS`
//! binary format.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, SimTransform};
use crate::image::Frame;
use crate::registration::FragmentRegistration;

pub const MAGIC: &[u8; 4] = b"VLGS";
pub const VERSION: u32 = 1;
pub const INITIAL_OPACITY: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SplatError {
    #[error("no registered pointmap for frame {0}")]
    MissingPointmap(u32),
    #[error("frame {frame} is {got} pixels, expected {expected}")]
    FrameSize {
        frame: u32,
        got: usize,
        expected: usize,
    },
    #[error("bad magic in Gaussian file")]
    BadMagic,
    #[error("unsupported Gaussian file version {0}")]
    VersionMismatch(u32),
    #[error("truncated Gaussian file")]
    Truncated,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Where a Gaussian was born: fragment, frame and row-major pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Source {
    pub fragment: u32,
    pub frame: u32,
    pub pixel: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub color: [f64; 3],
    /// In `(0, 1)`.
    pub opacity: f64,
    /// Isotropic standard deviation in world units.
    pub scale: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    /// First and last frame index the set was built from, inclusive.
    pub frame_range: (u32, u32),
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>, frame_range: (u32, u32)) -> Self {
        GaussianSet {
            gaussians,
            frame_range,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 44 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for g in &self.gaussians {
            let s = g.source;
            let vals = [
                g.center.x,
                g.center.y,
                g.center.z,
                g.color[0],
                g.color[1],
                g.color[2],
                g.opacity,
                g.scale,
                s.fragment as f64,
                s.frame as f64,
                s.pixel as f64,
            ];
            for v in vals {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses `VLGS` bytes. The frame range is recovered from provenance.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SplatError> {
        if bytes.len() < 12 {
            return Err(SplatError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(SplatError::BadMagic);
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(SplatError::VersionMismatch(word(4)));
        }
        let count = word(8) as usize;
        if bytes.len() != 12 + 44 * count {
            return Err(SplatError::Truncated);
        }
        let gaussians: Vec<Gaussian> = bytes[12..]
            .chunks_exact(44)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
                Gaussian {
                    center: Vector3::new(f(0), f(1), f(2)),
                    color: [f(3), f(4), f(5)],
                    opacity: f(6),
                    scale: f(7),
                    source: Source {
                        fragment: f(8) as u32,
                        frame: f(9) as u32,
                        pixel: f(10) as u32,
                    },
                }
            })
            .collect();
        let frame_range = gaussians
            .iter()
            .map(|g| g.source.frame)
            .fold(None, |acc: Option<(u32, u32)>, f| {
                Some(acc.map_or((f, f), |(a, b)| (a.min(f), b.max(f))))
            })
            .unwrap_or((0, 0));
        Ok(GaussianSet {
            gaussians,
            frame_range,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SplatError> {
        fs::write(path, self.to_bytes()).map_err(|e| SplatError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SplatError> {
        let bytes = fs::read(path).map_err(|e| SplatError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        GaussianSet::from_bytes(&bytes)
    }

    /// Hash over every attribute at full precision, mixed a word at a time.
    pub fn fingerprint(&self) -> u64 {
        let mut h = WordHash::new(self.len() as u64);
        for g in &self.gaussians {
            for v in [
                g.center.x,
                g.center.y,
                g.center.z,
                g.color[0],
                g.color[1],
                g.color[2],
                g.opacity,
                g.scale,
            ] {
                h.write(v.to_bits());
            }
            h.write(((g.source.fragment as u64) << 32) | g.source.frame as u64);
            h.write(g.source.pixel as u64);
        }
        h.finish()
    }

    /// RMS distance of the centers from their centroid.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.len() as f64;
        let mean = self
            .gaussians
            .iter()
            .fold(Vector3::zeros(), |a, g| a + g.center)
            / n;
        (self
            .gaussians
            .iter()
            .map(|g| (g.center - mean).norm_squared())
            .sum::<f64>()
            / n)
            .sqrt()
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Fnv::new()
    }
}

/// Multiply-rotate hash over 64-bit words, finished with a splitmix64
/// avalanche. Eight times fewer rounds than byte-wise FNV on the same data.
#[derive(Debug, Clone, Copy)]
pub struct WordHash(u64);

impl WordHash {
    pub fn new(seed: u64) -> Self {
        WordHash(seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    #[inline]
    pub fn write(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29);
    }

    pub fn finish(&self) -> u64 {
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = Fnv::new();
    h.write(bytes);
    h.finish()
}

/// One Gaussian per pixel of each of `frames`, in the fragment keyframe's
/// coordinates. Sized to cover one pixel at its own depth.
pub fn init_from_fragment(
    registration: &FragmentRegistration,
    frames: &[Frame],
    k: &CameraIntrinsics,
) -> Result<GaussianSet, SplatError> {
    let n = k.pixel_count();
    let mut gaussians = Vec::with_capacity(n * frames.len());
    for frame in frames {
        let reg = registration
            .get(frame.index)
            .ok_or(SplatError::MissingPointmap(frame.index))?;
        let got = frame.image.width * frame.image.height;
        if got != n || reg.pointmap.len() != n {
            return Err(SplatError::FrameSize {
                frame: frame.index,
                got,
                expected: n,
            });
        }
        for (p, x) in reg.pointmap.iter().enumerate() {
            let depth = reg.pose.transform_point(x).z;
            let i = 3 * p;
            gaussians.push(Gaussian {
                center: *x,
                color: [
                    frame.image.data[i],
                    frame.image.data[i + 1],
                    frame.image.data[i + 2],
                ],
                opacity: INITIAL_OPACITY,
                scale: depth.abs().max(1e-9) / k.fx,
                source: Source {
                    fragment: registration.fragment.index as u32,
                    frame: frame.index,
                    pixel: p as u32,
                },
            });
        }
    }
    Ok(GaussianSet {
        gaussians,
        frame_range: (registration.fragment.first(), registration.fragment.last()),
    })
}

/// Maps centers through `t` and multiplies scales by its scale factor.
pub fn transform_set(set: &GaussianSet, t: &SimTransform) -> GaussianSet {
    if t.is_identity() {
        return set.clone();
    }
    GaussianSet {
        gaussians: set
            .gaussians
            .iter()
            .map(|g| Gaussian {
                center: t.apply(&g.center),
                scale: g.scale * t.scale,
                ..*g
            })
            .collect(),
        frame_range: set.frame_range,
    }
}

pub fn concat(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    let frame_range = match (a.is_empty() && a.frame_range == (0, 0), b.is_empty() && b.frame_range == (0, 0)) {
        (true, _) => b.frame_range,
        (_, true) => a.frame_range,
        _ => (
            a.frame_range.0.min(b.frame_range.0),
            a.frame_range.1.max(b.frame_range.1),
        ),
    };
    let mut gaussians = Vec::with_capacity(a.len() + b.len());
    gaussians.extend_from_slice(&a.gaussians);
    gaussians.extend_from_slice(&b.gaussians);
    GaussianSet {
        gaussians,
        frame_range,
    }
}
