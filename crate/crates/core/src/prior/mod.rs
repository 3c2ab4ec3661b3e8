//! Two-view geometric priors: per-pair pointmaps, confidences and 2D
//! matches, plus the synthetic generator used as a test oracle.

mod io;
pub mod synth;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::CameraIntrinsics;

pub use io::{load_bundle, pair_file_bytes, parse_pair_file, save_bundle, MAGIC, MANIFEST, VERSION};
pub use synth::{generate_synthetic, NoiseSpec, SyntheticBundle, SyntheticScene};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported version {found} in {file} (expected {expected})")]
    VersionMismatch {
        file: String,
        found: u32,
        expected: u32,
    },
    #[error("dimension mismatch in {file}: {message}")]
    DimensionMismatch { file: String, message: String },
    #[error("truncated file {0}")]
    TruncatedFile(String),
    #[error("invalid value in {file}: {message}")]
    InvalidValue { file: String, message: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("frame {0} outside the synthetic trajectory")]
    FrameOutOfRange(u32),
    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(u32, u32),
}

/// Output of the two-view prior for one image pair. Both pointmaps are
/// expressed in `view_a`'s camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePrior {
    pub view_a: u32,
    pub view_b: u32,
    pub width: usize,
    pub height: usize,
    /// `H·W·3`, row-major.
    pub pointmap_a: Vec<f32>,
    pub pointmap_b: Vec<f32>,
    /// `H·W`.
    pub confidence_a: Vec<f32>,
    pub confidence_b: Vec<f32>,
    /// `(xa, ya, xb, yb)` sub-pixel correspondences.
    pub matches: Vec<[f32; 4]>,
}

fn vec3(buf: &[f32], i: usize) -> Vector3<f64> {
    Vector3::new(buf[3 * i] as f64, buf[3 * i + 1] as f64, buf[3 * i + 2] as f64)
}

impl PairwisePrior {
    pub fn key(&self) -> (u32, u32) {
        (self.view_a, self.view_b)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn point_a(&self, pixel: usize) -> Vector3<f64> {
        vec3(&self.pointmap_a, pixel)
    }

    pub fn point_b(&self, pixel: usize) -> Vector3<f64> {
        vec3(&self.pointmap_b, pixel)
    }

    /// Pointmap of `view` (either endpoint) as f64 vectors.
    pub fn pointmap_of(&self, view: u32) -> Option<Vec<Vector3<f64>>> {
        let buf = if view == self.view_a {
            &self.pointmap_a
        } else if view == self.view_b {
            &self.pointmap_b
        } else {
            return None;
        };
        Some((0..self.pixel_count()).map(|i| vec3(buf, i)).collect())
    }

    pub fn confidence_of(&self, view: u32) -> Option<&[f32]> {
        if view == self.view_a {
            Some(&self.confidence_a)
        } else if view == self.view_b {
            Some(&self.confidence_b)
        } else {
            None
        }
    }

    pub fn validate(&self, file: &str) -> Result<(), PriorError> {
        let n = self.pixel_count();
        let dim = |what: &str, got: usize, want: usize| {
            if got != want {
                Err(PriorError::DimensionMismatch {
                    file: file.to_string(),
                    message: format!("{what} has {got} values, expected {want}"),
                })
            } else {
                Ok(())
            }
        };
        dim("pointmap_a", self.pointmap_a.len(), 3 * n)?;
        dim("pointmap_b", self.pointmap_b.len(), 3 * n)?;
        dim("confidence_a", self.confidence_a.len(), n)?;
        dim("confidence_b", self.confidence_b.len(), n)?;
        let invalid = |message: String| {
            Err(PriorError::InvalidValue {
                file: file.to_string(),
                message,
            })
        };
        if self
            .pointmap_a
            .iter()
            .chain(&self.pointmap_b)
            .any(|v| !v.is_finite())
        {
            return invalid("non-finite pointmap value".into());
        }
        if self
            .confidence_a
            .iter()
            .chain(&self.confidence_b)
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return invalid("confidence must be finite and non-negative".into());
        }
        let (w, h) = (self.width as f32 - 0.5, self.height as f32 - 0.5);
        for (row, m) in self.matches.iter().enumerate() {
            let inside = |x: f32, y: f32| x >= -0.5 && y >= -0.5 && x < w && y < h;
            if !m.iter().all(|v| v.is_finite()) || !inside(m[0], m[1]) || !inside(m[2], m[3]) {
                return invalid(format!("match row {row} outside the image"));
            }
        }
        Ok(())
    }
}

/// Prior outputs for a set of image pairs sharing one intrinsics estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBundle {
    pub intrinsics: CameraIntrinsics,
    pairs: BTreeMap<(u32, u32), PairwisePrior>,
}

impl PriorBundle {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        PriorBundle {
            intrinsics,
            pairs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, pair: PairwisePrior) -> Result<(), PriorError> {
        if pair.width != self.intrinsics.width || pair.height != self.intrinsics.height {
            return Err(PriorError::DimensionMismatch {
                file: format!("pair ({}, {})", pair.view_a, pair.view_b),
                message: "pair size differs from the intrinsics image size".into(),
            });
        }
        let key = pair.key();
        if self.pairs.contains_key(&key) {
            return Err(PriorError::DuplicatePair(key.0, key.1));
        }
        self.pairs.insert(key, pair);
        Ok(())
    }

    pub fn get(&self, a: u32, b: u32) -> Option<&PairwisePrior> {
        self.pairs.get(&(a, b))
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairwisePrior> {
        self.pairs.values()
    }

    pub fn keys(&self) -> Vec<(u32, u32)> {
        self.pairs.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
