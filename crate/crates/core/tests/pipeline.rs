use std::fs;
use std::path::Path;

use fragsplat::config::RunConfig;
use fragsplat::pipeline::{
    holdout_frames, load_bundle_checked, load_frames, run, save_synthetic, synthesize, training_frames,
    NoiseLevel, PipelineError, RunDir, SynthSpec, Timings,
};
use fragsplat::prior::MANIFEST;
use fragsplat::registration::RegistrationError;

fn small_config(root: &Path, out: &str) -> RunConfig {
    RunConfig {
        frames: Some(root.join("frames")),
        bundle: Some(root.join("bundle")),
        reference: Some(root.join("trajectory_gt.txt")),
        out: Some(root.join(out)),
        local_iterations: 8,
        merge_iterations: 8,
        align_iterations: 8,
        ..RunConfig::default()
    }
}

fn synthetic_dir(frames: usize, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let s = synthesize(&SynthSpec { frames, size: 24, seed, noise: NoiseLevel::Moderate, k: 4 }).unwrap();
    save_synthetic(&s, dir.path()).unwrap();
    dir
}

#[test]
fn holdouts_skip_keyframes() {
    assert_eq!(holdout_frames(32, 4, 8).unwrap(), vec![8, 16, 24, 32]);
    // with k = 8 the keyframes are 1, 9, 17, so 8 and 16 stay held out
    assert_eq!(holdout_frames(17, 8, 8).unwrap(), vec![8, 16]);
    // k = 2 puts keyframes on odd frames only
    assert_eq!(holdout_frames(16, 2, 4).unwrap(), vec![4, 8, 12, 16]);
    assert_eq!(holdout_frames(9, 4, 0).unwrap(), Vec::<u32>::new());
    let cfg = RunConfig { subsample: 2, ..RunConfig::default() };
    let train = training_frames(16, &cfg).unwrap();
    assert!(train.iter().all(|f| f % 8 != 0));
    for key in [1, 5, 9, 13] {
        assert!(train.contains(&key));
    }
}

#[test]
fn run_writes_a_loadable_reconstruction() {
    let dir = synthetic_dir(16, 7);
    let out = run(&small_config(dir.path(), "run")).unwrap();
    let run_dir = RunDir(dir.path().join("run"));
    let (set, traj, k) = run_dir.load().unwrap();
    assert_eq!(set.len(), out.reconstruction.set.len());
    assert_eq!(traj.len(), 16);
    assert_eq!((k.width, k.height), (24, 24));
    assert_eq!(out.report.frames.iter().map(|f| f.frame).collect::<Vec<_>>(), vec![8, 16]);
    assert!(out.report.ate.unwrap().is_finite());
    let timings = Timings::parse(&fs::read_to_string(run_dir.timing()).unwrap());
    assert!(timings.get("eval").is_some());
    assert!(timings.total() > 0.0);
    let levels = fs::read_dir(run_dir.checkpoints()).unwrap().count();
    assert_eq!(levels, 3);
    let saved = RunConfig::load(&run_dir.config()).unwrap();
    assert_eq!(saved.local_iterations, 8);
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = synthetic_dir(12, 3);
    run(&small_config(dir.path(), "a")).unwrap();
    run(&small_config(dir.path(), "b")).unwrap();
    let (a, b) = (RunDir(dir.path().join("a")), RunDir(dir.path().join("b")));
    assert_eq!(fs::read(a.set()).unwrap(), fs::read(b.set()).unwrap());
    assert_eq!(fs::read(a.trajectory()).unwrap(), fs::read(b.trajectory()).unwrap());
    let mut other = small_config(dir.path(), "c");
    other.seed = 1;
    run(&other).unwrap();
    assert_ne!(fs::read(a.set()).unwrap(), fs::read(RunDir(dir.path().join("c")).set()).unwrap());
}

#[test]
fn data_errors_are_reported() {
    let dir = synthetic_dir(8, 0);
    let d = dir.path();
    let missing = load_bundle_checked(&d.join("nope")).unwrap_err();
    assert!(matches!(missing, PipelineError::BadBundlePath(..)));
    assert_eq!(missing.exit_code(), 3);
    let empty = RunDir(d.join("empty")).load().unwrap_err();
    assert!(matches!(empty, PipelineError::MissingReconstruction(_)));

    // a pair listed in the manifest but absent on disk
    fs::remove_file(d.join("bundle").join("pair_00001_00002.bin")).unwrap();
    let err = run(&small_config(d, "run")).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    // dropping it from the manifest too leaves registration without data
    let manifest = d.join("bundle").join(MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    let kept: String = text.lines().filter(|l| !l.starts_with("pair 1 2 ")).map(|l| format!("{l}\n")).collect();
    fs::write(&manifest, kept).unwrap();
    let err = run(&small_config(d, "run")).unwrap_err();
    assert!(matches!(err, PipelineError::Registration(RegistrationError::MissingPair(1, 2))), "{err}");
    assert_eq!(err.exit_code(), 3);

    fs::write(d.join("frames").join("frame_0001.ppm"), b"P6\n2 2\n255\n").unwrap();
    assert!(load_frames(&d.join("frames")).is_err());
}
