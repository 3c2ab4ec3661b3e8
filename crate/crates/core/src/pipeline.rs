//! End-to-end driver: registration, per-fragment construction, merging and
//! evaluation, plus the on-disk layout of frames and run directories.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, MergeOrder, RunConfig};
use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Trajectory};
use crate::hierarchy::{
    refine_node, run_hierarchy, run_sequential, HierarchyError, HierarchySpec, MergeRecord, Node,
};
use crate::image::{Frame, Image, ImageError};
use crate::metrics::{ate, psnr, ssim, MetricsError};
use crate::optim::{optimize_pose_only, GroupRates, OptimError, OptimSpec};
use crate::prior::{generate_synthetic, NoiseSpec, PriorBundle, PriorError, SyntheticBundle, SyntheticScene};
use crate::registration::{
    global_keyframe_alignment, partition, register_fragment, required_pairs, AlignSpec,
    KeyframeAlignment, KeyframeGraph, RansacSpec, RegistrationError,
};
use crate::render::render;
use crate::splat::{init_from_fragment, GaussianSet, SplatError};

pub const SET_FILE: &str = "gaussians.vlgs";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const CAMERA_FILE: &str = "camera.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const MERGES_FILE: &str = "merges.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad bundle path {0}: {1}")]
    BadBundlePath(String, String),
    #[error("bad frames: {0}")]
    BadFrames(String),
    #[error("no reconstruction in {0}")]
    MissingReconstruction(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("prior: {0}")]
    Prior(#[from] PriorError),
    #[error("registration: {0}")]
    Registration(#[from] RegistrationError),
    #[error("hierarchy: {0}")]
    Hierarchy(#[from] HierarchyError),
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("splat: {0}")]
    Splat(#[from] SplatError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// 2 for configuration, 3 for input data, 4 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        use PipelineError::*;
        match self {
            Config(_) | BadSpec(_) => 2,
            BadBundlePath(..) | BadFrames(_) | MissingReconstruction(_) | Io { .. } | Prior(_)
            | Image(_) => 3,
            Registration(RegistrationError::MissingPair(..))
            | Registration(RegistrationError::TooFewFrames(_))
            | Registration(RegistrationError::InvalidFragmentSize(_)) => 3,
            Hierarchy(HierarchyError::Io { .. })
            | Hierarchy(HierarchyError::MissingFrame(_))
            | Hierarchy(HierarchyError::Splat(_)) => 3,
            Splat(_) => 3,
            Geometry(GeometryError::Io { .. })
            | Geometry(GeometryError::Trajectory(_))
            | Geometry(GeometryError::InvalidIntrinsics(_)) => 3,
            Metrics(MetricsError::DimensionMismatch(..)) | Metrics(MetricsError::IndexMismatch) => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Wall-clock seconds per stage, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn push(&mut self, stage: &str, seconds: f64) {
        match self.0.iter_mut().find(|(s, _)| s == stage) {
            Some(slot) => slot.1 = seconds,
            None => self.0.push((stage.to_string(), seconds)),
        }
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.0.iter().find(|(s, _)| s == stage).map(|(_, t)| *t)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, t)| t).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (stage, t) in &self.0 {
            let _ = writeln!(s, "{stage} {t:.3}");
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        let mut out = Timings::default();
        for line in text.lines() {
            if let Some((stage, t)) = line.rsplit_once(' ') {
                if let Ok(t) = t.parse() {
                    out.push(stage, t);
                }
            }
        }
        out
    }
}

/// Frames with `index % every == 0`, never a keyframe.
pub fn holdout_frames(n: usize, k: usize, every: u32) -> Result<Vec<u32>, PipelineError> {
    if every == 0 {
        return Ok(Vec::new());
    }
    let keys: BTreeSet<u32> = partition(n, k)?.iter().map(|f| f.keyframe()).collect();
    Ok((1..=n as u32)
        .filter(|i| i % every == 0 && !keys.contains(i))
        .collect())
}

/// Frames that drive optimization: everything not held out, thinned to every
/// `subsample`-th non-key frame. Keyframes always train.
pub fn training_frames(n: usize, cfg: &RunConfig) -> Result<Vec<u32>, PipelineError> {
    let fragments = partition(n, cfg.k)?;
    let held: BTreeSet<u32> = holdout_frames(n, cfg.k, cfg.holdout_every)?.into_iter().collect();
    let mut out = Vec::new();
    for f in &fragments {
        out.push(f.keyframe());
        let rest = f.frames[1..].iter().filter(|i| !held.contains(i));
        out.extend(rest.enumerate().filter(|(j, _)| (j + 1) % cfg.subsample as usize == 0).map(|(_, i)| *i));
    }
    Ok(out)
}

fn optim_spec(cfg: &RunConfig, iterations: usize) -> OptimSpec {
    OptimSpec {
        iterations,
        seed: cfg.seed,
        rates: GroupRates {
            pose: cfg.pose_step,
            ..GroupRates::default()
        },
        beta: cfg.beta,
        ..OptimSpec::default()
    }
}

pub fn ransac_spec(cfg: &RunConfig) -> RansacSpec {
    RansacSpec {
        threshold: cfg.ransac_threshold,
        iterations: cfg.ransac_iterations,
        seed: cfg.seed,
        min_inlier_ratio: cfg.ransac_min_inliers,
    }
}

pub fn hierarchy_spec(cfg: &RunConfig) -> HierarchySpec {
    HierarchySpec {
        beta: cfg.beta,
        align: OptimSpec {
            freeze: crate::optim::Freeze::gaussians(),
            ..optim_spec(cfg, cfg.align_iterations)
        },
        merge: optim_spec(cfg, cfg.merge_iterations),
        novel_frames: cfg.novel_frames,
    }
}

fn check_frames(frames: &[Frame], k: &CameraIntrinsics) -> Result<(), PipelineError> {
    for (i, f) in frames.iter().enumerate() {
        if f.index != i as u32 + 1 {
            return Err(PipelineError::BadFrames(format!(
                "expected frames numbered 1..={}, found {} at position {}",
                frames.len(),
                f.index,
                i + 1
            )));
        }
        if f.image.width != k.width || f.image.height != k.height {
            return Err(PipelineError::BadFrames(format!(
                "frame {} is {}x{}, the bundle is {}x{}",
                f.index, f.image.width, f.image.height, k.width, k.height
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub set: GaussianSet,
    /// Every frame, in the camera frame of frame 1.
    pub trajectory: Trajectory,
    pub training: Vec<u32>,
    pub holdout: Vec<u32>,
    pub alignment: KeyframeAlignment,
    /// Refined fragment nodes before merging.
    pub leaves: Vec<Node>,
    pub records: Vec<MergeRecord>,
    pub timings: Timings,
}

/// Runs registration, builds and refines one node per fragment, then merges.
/// When `checkpoints` is given, every level of the merge is written below it.
pub fn reconstruct(
    frames: &[Frame],
    bundle: &PriorBundle,
    cfg: &RunConfig,
    checkpoints: Option<&Path>,
) -> Result<Reconstruction, PipelineError> {
    cfg.validate()?;
    let k = bundle.intrinsics;
    check_frames(frames, &k)?;
    let n = frames.len();
    let mut timings = Timings::default();

    let clock = Instant::now();
    let fragments = partition(n, cfg.k)?;
    let graph = KeyframeGraph::from_fragments(&fragments);
    let ransac = ransac_spec(cfg);
    let align = AlignSpec {
        iterations: cfg.keyframe_iterations,
        step: cfg.keyframe_step,
        ransac,
        ..AlignSpec::default()
    };
    let alignment = global_keyframe_alignment(&graph, bundle, &align)?;
    let registrations = fragments
        .iter()
        .map(|f| register_fragment(f, bundle, &alignment, &ransac))
        .collect::<Result<Vec<_>, _>>()?;
    timings.push("registration", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let training = training_frames(n, cfg)?;
    let holdout = holdout_frames(n, cfg.k, cfg.holdout_every)?;
    let train_set: BTreeSet<u32> = training.iter().copied().collect();
    let lookup: BTreeMap<u32, &Frame> = frames.iter().map(|f| (f.index, f)).collect();
    let local = optim_spec(cfg, cfg.local_iterations);
    let mut leaves = Vec::with_capacity(registrations.len());
    for reg in &registrations {
        let own: Vec<u32> = reg
            .fragment
            .frames
            .iter()
            .copied()
            .filter(|f| train_set.contains(f))
            .collect();
        let imgs: Vec<Frame> = own.iter().map(|f| lookup[f].clone()).collect();
        let node = Node {
            set: init_from_fragment(reg, &imgs, &k)?,
            poses: reg.frames.iter().map(|r| (r.frame, r.pose)).collect(),
            training: own,
            anchor: reg.fragment.keyframe(),
        };
        leaves.push(refine_node(&node, &lookup, &k, &local)?);
    }
    timings.push("local construction", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let spec = hierarchy_spec(cfg);
    let result = match cfg.merge_order {
        MergeOrder::Tree => run_hierarchy(leaves.clone(), &alignment, frames, &k, &spec, checkpoints)?,
        MergeOrder::Sequential => run_sequential(leaves.clone(), &alignment, frames, &k, &spec)?,
    };
    timings.push("hierarchy", clock.elapsed().as_secs_f64());

    let trajectory = result.root.trajectory()?;
    Ok(Reconstruction {
        set: result.root.set,
        trajectory,
        training,
        holdout,
        alignment,
        leaves,
        records: result.records,
        timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub frame: u32,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Absent without a reference trajectory.
    pub ate: Option<f64>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("frame psnr ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{} {} {:.6}", f.frame, fmt_db(f.psnr), f.ssim);
        }
        s.push_str("mean_psnr mean_ssim ate\n");
        let ate = self.ate.map_or("-".to_string(), |a| format!("{a:.6e}"));
        let _ = writeln!(s, "{} {:.6} {ate}", fmt_db(self.mean_psnr), self.mean_ssim);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{},{:.6}", f.frame, fmt_db(f.psnr), f.ssim);
        }
        let ate = self.ate.map_or(String::new(), |a| format!("{a:.6e}"));
        let _ = writeln!(s, "mean,{},{:.6}", fmt_db(self.mean_psnr), self.mean_ssim);
        let _ = writeln!(s, "ate,{ate},");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    /// Pose refinement steps against each held-out image before scoring.
    pub pose_iterations: usize,
    pub pose_step: f64,
    pub beta: f64,
}

impl EvalSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalSpec {
            pose_iterations: cfg.eval_pose_iterations,
            pose_step: cfg.pose_step,
            beta: cfg.beta,
        }
    }
}

/// Renders each held-out frame from its stitched pose and scores it. ATE is
/// computed over the frames both trajectories share.
pub fn evaluate(
    set: &GaussianSet,
    trajectory: &Trajectory,
    frames: &[Frame],
    holdout: &[u32],
    k: &CameraIntrinsics,
    reference: Option<&Trajectory>,
    spec: &EvalSpec,
) -> Result<EvalReport, PipelineError> {
    let lookup: BTreeMap<u32, &Frame> = frames.iter().map(|f| (f.index, f)).collect();
    let mut scores = Vec::with_capacity(holdout.len());
    for &f in holdout {
        let frame = lookup
            .get(&f)
            .ok_or_else(|| PipelineError::BadFrames(format!("held-out frame {f} has no image")))?;
        let mut pose = *trajectory
            .get(f)
            .ok_or_else(|| PipelineError::BadFrames(format!("held-out frame {f} has no pose")))?;
        if spec.pose_iterations > 0 {
            let fit_spec = OptimSpec {
                rates: GroupRates {
                    pose: spec.pose_step,
                    ..GroupRates::default()
                },
                beta: spec.beta,
                ..OptimSpec::pose_only(spec.pose_iterations)
            };
            pose = optimize_pose_only(set, frame, &pose, k, &fit_spec)?.pose;
        }
        let img = render(set, &pose, k).image();
        scores.push(FrameScore {
            frame: f,
            psnr: psnr(&img, &frame.image)?,
            ssim: ssim(&img, &frame.image)?,
        });
    }
    let count = scores.len().max(1) as f64;
    let ate = match reference {
        Some(r) => {
            let (est, refr) = common_frames(trajectory, r)?;
            Some(ate(&est, &refr)?)
        }
        None => None,
    };
    Ok(EvalReport {
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / count,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / count,
        frames: scores,
        ate,
    })
}

/// Restricts both trajectories to their shared frame indices.
pub fn common_frames(a: &Trajectory, b: &Trajectory) -> Result<(Trajectory, Trajectory), PipelineError> {
    let keep: BTreeSet<u32> = a.indices().filter(|i| b.get(*i).is_some()).collect();
    let pick = |t: &Trajectory| -> Vec<(u32, Pose)> {
        t.entries().iter().filter(|(i, _)| keep.contains(i)).copied().collect()
    };
    Ok((Trajectory::new(pick(a))?, Trajectory::new(pick(b))?))
}

/// `frame_0001.ppm` style name of frame `index`.
pub fn frame_filename(index: u32) -> String {
    format!("frame_{index:04}.ppm")
}

pub fn save_frames(frames: &[Frame], dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for f in frames {
        f.image.save_ppm(&dir.join(frame_filename(f.index)))?;
    }
    Ok(())
}

/// Loads every `frame_NNNN.ppm` in `dir`, ordered by index.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut found = Vec::new();
    for e in entries {
        let path = e.map_err(|e| io_err(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let index = name
            .strip_prefix("frame_")
            .and_then(|r| r.strip_suffix(".ppm"))
            .and_then(|r| r.parse::<u32>().ok());
        if let Some(i) = index {
            found.push((i, path));
        }
    }
    if found.is_empty() {
        return Err(PipelineError::BadFrames(format!("no frame_*.ppm in {}", dir.display())));
    }
    found.sort();
    found
        .into_iter()
        .map(|(index, path)| Ok(Frame { index, image: Image::load_ppm(&path)? }))
        .collect()
}

pub fn load_bundle_checked(dir: &Path) -> Result<PriorBundle, PipelineError> {
    if !dir.join(crate::prior::MANIFEST).is_file() {
        return Err(PipelineError::BadBundlePath(
            dir.display().to_string(),
            "no manifest".to_string(),
        ));
    }
    crate::prior::load_bundle(dir).map_err(|e| match e {
        PriorError::Io { .. } => PipelineError::BadBundlePath(dir.display().to_string(), e.to_string()),
        other => PipelineError::Prior(other),
    })
}

pub fn camera_text(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_camera(text: &str) -> Result<CameraIntrinsics, PipelineError> {
    let bad = || PipelineError::BadFrames(format!("bad camera line `{}`", text.trim()));
    let f: Vec<&str> = text.split_whitespace().collect();
    if f.len() != 6 {
        return Err(bad());
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
    let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
    Ok(CameraIntrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, int(4)?, int(5)?)?)
}

pub fn records_text(records: &[MergeRecord]) -> String {
    let mut s = String::from(
        "level reference moving reference_count moving_count kept merged_count hash_before hash_after align_loss_first align_loss_last scale\n",
    );
    for r in records {
        let first = r.align_losses.first().copied().unwrap_or(f64::NAN);
        let last = r.align_losses.iter().copied().fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            s,
            "{} {}-{} {}-{} {} {} {} {} {:016x} {:016x} {:.6e} {:.6e} {:.6}",
            r.level,
            r.reference.0,
            r.reference.1,
            r.moving.0,
            r.moving.1,
            r.reference_count,
            r.moving_count,
            r.kept,
            r.merged_count,
            r.reference_hash.0,
            r.reference_hash.1,
            first,
            last,
            r.refined.scale,
        );
    }
    s
}

/// Files a run directory holds.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn set(&self) -> PathBuf {
        self.0.join(SET_FILE)
    }

    pub fn trajectory(&self) -> PathBuf {
        self.0.join(TRAJECTORY_FILE)
    }

    pub fn camera(&self) -> PathBuf {
        self.0.join(CAMERA_FILE)
    }

    pub fn timing(&self) -> PathBuf {
        self.0.join(TIMING_FILE)
    }

    pub fn config(&self) -> PathBuf {
        self.0.join(CONFIG_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.0.join(CHECKPOINT_DIR)
    }

    /// Fails with `MissingReconstruction` unless the set, trajectory and
    /// camera files exist.
    pub fn load(&self) -> Result<(GaussianSet, Trajectory, CameraIntrinsics), PipelineError> {
        for p in [self.set(), self.trajectory(), self.camera()] {
            if !p.is_file() {
                return Err(PipelineError::MissingReconstruction(self.0.display().to_string()));
            }
        }
        let cam = fs::read_to_string(self.camera()).map_err(|e| io_err(&self.camera(), e))?;
        Ok((
            GaussianSet::load(&self.set())?,
            Trajectory::load(&self.trajectory())?,
            parse_camera(&cam)?,
        ))
    }

    pub fn write_report(&self, report: &EvalReport) -> Result<(), PipelineError> {
        write(&self.0.join(EVAL_FILE), &report.to_text())?;
        write(&self.0.join(EVAL_CSV), &report.to_csv())
    }

    pub fn update_timing(&self, stage: &str, seconds: f64) -> Result<(), PipelineError> {
        let mut t = fs::read_to_string(self.timing())
            .map(|s| Timings::parse(&s))
            .unwrap_or_default();
        t.push(stage, seconds);
        write(&self.timing(), &t.to_text())
    }
}

/// Outcome of a full run: the reconstruction, its holdout report and where
/// it was written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reconstruction: Reconstruction,
    pub report: EvalReport,
}

/// Reconstructs from `cfg.frames` and `cfg.bundle`, scores the held-out
/// frames and writes everything under `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let need = |p: &Option<PathBuf>, key: &'static str| {
        p.clone().ok_or(PipelineError::Config(ConfigError::OutOfRange {
            key,
            reason: "path is required",
        }))
    };
    let bundle_dir = need(&cfg.bundle, "bundle")?;
    let frames_dir = need(&cfg.frames, "frames")?;
    let out = RunDir(need(&cfg.out, "out")?);
    let bundle = load_bundle_checked(&bundle_dir)?;
    let frames = load_frames(&frames_dir)?;
    let reference = cfg.reference.as_deref().map(Trajectory::load).transpose()?;
    fs::create_dir_all(&out.0).map_err(|e| io_err(&out.0, e))?;
    write(&out.config(), &cfg.to_text())?;
    let rec = reconstruct(&frames, &bundle, cfg, Some(&out.checkpoints()))?;
    rec.set.save(&out.set())?;
    rec.trajectory.save(&out.trajectory())?;
    write(&out.camera(), &camera_text(&bundle.intrinsics))?;
    write(&out.0.join(MERGES_FILE), &records_text(&rec.records))?;

    let clock = Instant::now();
    let report = evaluate(
        &rec.set,
        &rec.trajectory,
        &frames,
        &rec.holdout,
        &bundle.intrinsics,
        reference.as_ref(),
        &EvalSpec::from_config(cfg),
    )?;
    let mut rec = rec;
    rec.timings.push("eval", clock.elapsed().as_secs_f64());
    write(&out.timing(), &rec.timings.to_text())?;
    out.write_report(&report)?;
    Ok(RunOutput {
        reconstruction: rec,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    None,
    Moderate,
}

impl std::str::FromStr for NoiseLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(NoiseLevel::None),
            "moderate" => Ok(NoiseLevel::Moderate),
            _ => Err(format!("unknown noise level `{s}` (none, moderate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    pub noise: NoiseLevel,
    /// Fragment size the bundle is generated for.
    pub k: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            frames: 32,
            size: 128,
            seed: 0,
            noise: NoiseLevel::Moderate,
            k: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub scene: SyntheticScene,
    pub frames: Vec<Frame>,
    pub bundle: SyntheticBundle,
}

/// The desk scene with every prior pair a `k`-fragment run reads.
pub fn synthesize(spec: &SynthSpec) -> Result<Synthetic, PipelineError> {
    if spec.frames < 2 || spec.size < 8 || spec.k < 2 {
        return Err(PipelineError::BadSpec(format!(
            "need frames >= 2, size >= 8 and k >= 2, got {}, {}, {}",
            spec.frames, spec.size, spec.k
        )));
    }
    let scene = SyntheticScene::desk(spec.frames, spec.size, spec.seed);
    let noise = match spec.noise {
        NoiseLevel::None => NoiseSpec::none(),
        NoiseLevel::Moderate => NoiseSpec::moderate(scene.diameter()),
    };
    let scene = scene.with_noise(noise);
    let pairs = required_pairs(spec.frames, spec.k)?;
    let bundle = generate_synthetic(&scene, &pairs)?;
    let frames = scene.frames();
    Ok(Synthetic { scene, frames, bundle })
}

/// Writes `frames/`, `bundle/` and `trajectory_gt.txt` under `dir`.
pub fn save_synthetic(s: &Synthetic, dir: &Path) -> Result<(), PipelineError> {
    save_frames(&s.frames, &dir.join("frames"))?;
    crate::prior::save_bundle(&s.bundle.bundle, &dir.join("bundle"))?;
    s.scene.trajectory.save(&dir.join("trajectory_gt.txt"))?;
    Ok(())
}
