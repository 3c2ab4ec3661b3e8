use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use fragsplat::config::{ConfigError, RunConfig};
use fragsplat::geometry::{Pose, Trajectory};
use fragsplat::image::depth_to_pgm16;
use fragsplat::pipeline::{
    self, holdout_frames, EvalSpec, NoiseLevel, PipelineError, RunDir, SynthSpec,
};
use fragsplat::render::render;
use fragsplat::splat::GaussianSet;

#[derive(Parser)]
#[command(name = "fragsplat", version, about = "Pose-free video-to-3D reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a scene from frames and a prior bundle.
    Reconstruct {
        /// `key = value` config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: ConfigFlags,
    },
    /// Score held-out frames of a finished run.
    Eval {
        /// Run directory written by `reconstruct`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        /// Ground-truth trajectory; ATE is omitted without it.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Overrides the run's holdout rule.
        #[arg(long)]
        holdout_every: Option<u32>,
        #[arg(long)]
        eval_pose_iterations: Option<usize>,
    },
    /// Write a synthetic scene: frames, prior bundle and true trajectory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// none or moderate
        #[arg(long, default_value = "moderate")]
        noise: NoiseLevel,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Debug render of a Gaussian set from one pose.
    Render {
        /// Run directory supplying the set, trajectory and camera.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Frame whose trajectory pose to use.
        #[arg(long, conflicts_with = "pose")]
        frame: Option<u32>,
        /// World-to-camera pose as `tx ty tz qx qy qz qw`.
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 16-bit depth map.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
}

/// One flag per config key.
#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    keyframe_iterations: Option<String>,
    #[arg(long)]
    keyframe_step: Option<String>,
    #[arg(long)]
    local_iterations: Option<String>,
    #[arg(long)]
    merge_iterations: Option<String>,
    #[arg(long)]
    align_iterations: Option<String>,
    #[arg(long)]
    pose_step: Option<String>,
    #[arg(long)]
    ransac_threshold: Option<String>,
    #[arg(long)]
    ransac_iterations: Option<String>,
    #[arg(long)]
    ransac_min_inliers: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    holdout_every: Option<String>,
    #[arg(long)]
    subsample: Option<String>,
    #[arg(long)]
    novel_frames: Option<String>,
    #[arg(long)]
    merge_order: Option<String>,
    #[arg(long)]
    eval_pose_iterations: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    #[arg(long)]
    bundle: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    reference: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("k", &self.k),
            ("beta", &self.beta),
            ("keyframe_iterations", &self.keyframe_iterations),
            ("keyframe_step", &self.keyframe_step),
            ("local_iterations", &self.local_iterations),
            ("merge_iterations", &self.merge_iterations),
            ("align_iterations", &self.align_iterations),
            ("pose_step", &self.pose_step),
            ("ransac_threshold", &self.ransac_threshold),
            ("ransac_iterations", &self.ransac_iterations),
            ("ransac_min_inliers", &self.ransac_min_inliers),
            ("seed", &self.seed),
            ("holdout_every", &self.holdout_every),
            ("subsample", &self.subsample),
            ("novel_frames", &self.novel_frames),
            ("merge_order", &self.merge_order),
            ("eval_pose_iterations", &self.eval_pose_iterations),
            ("frames", &self.frames),
            ("bundle", &self.bundle),
            ("out", &self.out),
            ("reference", &self.reference),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }
}

fn build_config(file: Option<&Path>, flags: &ConfigFlags) -> Result<RunConfig, ConfigError> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in flags.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_pose(text: &str) -> Result<Pose, PipelineError> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| PipelineError::Config(ConfigError::OutOfRange { key: "pose", reason: "expected 7 numbers" }))?;
    if v.len() != 7 {
        return Err(PipelineError::Config(ConfigError::OutOfRange {
            key: "pose",
            reason: "expected `tx ty tz qx qy qz qw`",
        }));
    }
    Ok(Pose::from_quaternion(v[6], v[3], v[4], v[5], Vector3::new(v[0], v[1], v[2])))
}

fn reconstruct(config: Option<PathBuf>, keys: ConfigFlags) -> Result<(), PipelineError> {
    let cfg = build_config(config.as_deref(), &keys)?;
    let out = pipeline::run(&cfg)?;
    let rec = &out.reconstruction;
    eprintln!(
        "{} frames, {} Gaussians, {} merges",
        rec.trajectory.len(),
        rec.set.len(),
        rec.records.len()
    );
    eprint!("{}", rec.timings.to_text());
    print!("{}", out.report.to_text());
    Ok(())
}

fn eval(
    run: PathBuf,
    frames: PathBuf,
    reference: Option<PathBuf>,
    holdout_every: Option<u32>,
    eval_pose_iterations: Option<usize>,
) -> Result<(), PipelineError> {
    let dir = RunDir(run);
    let (set, trajectory, k) = dir.load()?;
    let mut cfg = if dir.config().is_file() {
        RunConfig::load(&dir.config())?
    } else {
        RunConfig::default()
    };
    if let Some(n) = holdout_every {
        cfg.holdout_every = n;
    }
    if let Some(n) = eval_pose_iterations {
        cfg.eval_pose_iterations = n;
    }
    let frames = pipeline::load_frames(&frames)?;
    let reference = reference.as_deref().map(Trajectory::load).transpose()?;
    let holdout = holdout_frames(trajectory.len(), cfg.k, cfg.holdout_every)?;
    let clock = Instant::now();
    let report = pipeline::evaluate(
        &set,
        &trajectory,
        &frames,
        &holdout,
        &k,
        reference.as_ref(),
        &EvalSpec::from_config(&cfg),
    )?;
    dir.update_timing("eval", clock.elapsed().as_secs_f64())?;
    dir.write_report(&report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn synth(out: PathBuf, spec: SynthSpec) -> Result<(), PipelineError> {
    let s = pipeline::synthesize(&spec)?;
    pipeline::save_synthetic(&s, &out)?;
    eprintln!(
        "{} frames, {} prior pairs, diameter {:.4}",
        s.frames.len(),
        s.bundle.bundle.len(),
        s.scene.diameter()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render_cmd(
    run: Option<PathBuf>,
    set: Option<PathBuf>,
    camera: Option<PathBuf>,
    trajectory: Option<PathBuf>,
    frame: Option<u32>,
    pose: Option<String>,
    out: PathBuf,
    depth: Option<PathBuf>,
) -> Result<(), PipelineError> {
    let dir = run.map(RunDir);
    let pick = |given: Option<PathBuf>, from_run: fn(&RunDir) -> PathBuf, key: &'static str| {
        given.or_else(|| dir.as_ref().map(from_run)).ok_or(PipelineError::Config(
            ConfigError::OutOfRange { key, reason: "give it directly or through --run" },
        ))
    };
    let set_path = pick(set, RunDir::set, "set")?;
    let camera_path = pick(camera, RunDir::camera, "camera")?;
    let set = GaussianSet::load(&set_path)?;
    let cam = fs::read_to_string(&camera_path).map_err(|e| PipelineError::Io {
        path: camera_path.display().to_string(),
        message: e.to_string(),
    })?;
    let k = pipeline::parse_camera(&cam)?;
    let pose = match (pose, frame) {
        (Some(p), _) => parse_pose(&p)?,
        (None, Some(f)) => {
            let t = Trajectory::load(&pick(trajectory, RunDir::trajectory, "trajectory")?)?;
            *t.get(f).ok_or_else(|| PipelineError::BadFrames(format!("no pose for frame {f}")))?
        }
        (None, None) => Pose::identity(),
    };
    let r = render(&set, &pose, &k);
    r.image().save_ppm(&out)?;
    if let Some(path) = depth {
        let max = r.depth.iter().copied().fold(0.0, f64::max);
        let bytes = depth_to_pgm16(r.width, r.height, &r.depth, max.max(1e-12));
        fs::write(&path, bytes).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Reconstruct { config, keys } => reconstruct(config, keys),
        Command::Eval {
            run,
            frames,
            reference,
            holdout_every,
            eval_pose_iterations,
        } => eval(run, frames, reference, holdout_every, eval_pose_iterations),
        Command::Synth {
            out,
            frames,
            size,
            seed,
            noise,
            k,
        } => synth(out, SynthSpec { frames, size, seed, noise, k }),
        Command::Render {
            run,
            set,
            camera,
            trajectory,
            frame,
            pose,
            out,
            depth,
        } => render_cmd(run, set, camera, trajectory, frame, pose, out, depth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
