//! Run settings and their `key = value` file form.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("{key} is out of range: {reason}")]
    OutOfRange { key: &'static str, reason: &'static str },
    #[error("reading {0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOrder {
    Tree,
    Sequential,
}

impl FromStr for MergeOrder {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "tree" => Ok(MergeOrder::Tree),
            "sequential" => Ok(MergeOrder::Sequential),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Frames per fragment.
    pub k: usize,
    /// Confidence threshold of the visibility mask.
    pub beta: f64,
    pub keyframe_iterations: usize,
    pub keyframe_step: f64,
    /// Joint refinement of each fragment.
    pub local_iterations: usize,
    /// Joint refinement after each merge.
    pub merge_iterations: usize,
    /// Similarity fit of each merge.
    pub align_iterations: usize,
    pub pose_step: f64,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub ransac_min_inliers: f64,
    pub seed: u64,
    /// Every n-th frame is held out for evaluation; 0 holds out nothing.
    pub holdout_every: u32,
    /// Train on every n-th remaining frame (keyframes always train).
    pub subsample: u32,
    /// Leading frames of the moving node used to fit each merge transform.
    pub novel_frames: usize,
    pub merge_order: MergeOrder,
    /// Pose refinement steps per held-out frame before scoring it.
    pub eval_pose_iterations: usize,
    pub frames: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 4,
            beta: 0.9,
            keyframe_iterations: 200,
            keyframe_step: 0.01,
            local_iterations: 200,
            merge_iterations: 200,
            align_iterations: 200,
            pose_step: 1e-3,
            ransac_threshold: 2.0,
            ransac_iterations: 500,
            ransac_min_inliers: 0.3,
            seed: 0,
            holdout_every: 8,
            subsample: 1,
            novel_frames: 2,
            merge_order: MergeOrder::Tree,
            eval_pose_iterations: 0,
            frames: None,
            bundle: None,
            out: None,
            reference: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "k" => self.k = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "keyframe_iterations" => self.keyframe_iterations = parse(key, value)?,
            "keyframe_step" => self.keyframe_step = parse(key, value)?,
            "local_iterations" => self.local_iterations = parse(key, value)?,
            "merge_iterations" => self.merge_iterations = parse(key, value)?,
            "align_iterations" => self.align_iterations = parse(key, value)?,
            "pose_step" => self.pose_step = parse(key, value)?,
            "ransac_threshold" => self.ransac_threshold = parse(key, value)?,
            "ransac_iterations" => self.ransac_iterations = parse(key, value)?,
            "ransac_min_inliers" => self.ransac_min_inliers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "holdout_every" => self.holdout_every = parse(key, value)?,
            "subsample" => self.subsample = parse(key, value)?,
            "novel_frames" => self.novel_frames = parse(key, value)?,
            "merge_order" => self.merge_order = parse(key, value)?,
            "eval_pose_iterations" => self.eval_pose_iterations = parse(key, value)?,
            "frames" => self.frames = Some(value.into()),
            "bundle" => self.bundle = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "reference" => self.reference = Some(value.into()),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        RunConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |ok: bool, key, reason| if ok { Ok(()) } else { Err(ConfigError::OutOfRange { key, reason }) };
        range(self.k >= 2, "k", "fragments need at least 2 frames")?;
        range(self.beta > 0.0 && self.beta < 1.0, "beta", "must lie in (0, 1)")?;
        range(self.keyframe_step > 0.0, "keyframe_step", "must be positive")?;
        range(self.pose_step > 0.0, "pose_step", "must be positive")?;
        range(self.ransac_threshold > 0.0, "ransac_threshold", "must be positive")?;
        range(self.ransac_iterations > 0, "ransac_iterations", "must be positive")?;
        range(
            (0.0..=1.0).contains(&self.ransac_min_inliers),
            "ransac_min_inliers",
            "must lie in [0, 1]",
        )?;
        range(self.subsample >= 1, "subsample", "must be at least 1")?;
        range(self.novel_frames >= 1, "novel_frames", "must be at least 1")?;
        Ok(())
    }

    /// Canonical `key = value` rendering of every non-path setting.
    pub fn to_text(&self) -> String {
        let order = match self.merge_order {
            MergeOrder::Tree => "tree",
            MergeOrder::Sequential => "sequential",
        };
        let mut s = format!(
            "k = {}\nbeta = {}\nkeyframe_iterations = {}\nkeyframe_step = {}\nlocal_iterations = {}\n\
             merge_iterations = {}\nalign_iterations = {}\npose_step = {}\nransac_threshold = {}\n\
             ransac_iterations = {}\nransac_min_inliers = {}\nseed = {}\nholdout_every = {}\n\
             subsample = {}\nnovel_frames = {}\nmerge_order = {}\neval_pose_iterations = {}\n",
            self.k,
            self.beta,
            self.keyframe_iterations,
            self.keyframe_step,
            self.local_iterations,
            self.merge_iterations,
            self.align_iterations,
            self.pose_step,
            self.ransac_threshold,
            self.ransac_iterations,
            self.ransac_min_inliers,
            self.seed,
            self.holdout_every,
            self.subsample,
            self.novel_frames,
            order,
            self.eval_pose_iterations,
        );
        for (key, v) in [
            ("frames", &self.frames),
            ("bundle", &self.bundle),
            ("out", &self.out),
            ("reference", &self.reference),
        ] {
            if let Some(p) = v {
                s.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        s
    }
}
